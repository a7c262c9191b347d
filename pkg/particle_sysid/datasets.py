"""
Dataset loading, validation and synthetic generation.

Three on-disk layouts are understood:

- generic: header ``t,u,y`` (or ``u0,u1,..`` / ``y0,y1,..``); an empty y
  field marks a missing observation. This is what ``write_dataset`` emits.
- watertank: two columns ``u,y`` per series, or the benchmark layout with
  ``uEst,yEst,uVal,yVal`` columns. The input is shifted by one step so that
  the transition into step t sees the input applied during step t-1.
- dengue: dated reports ``date,y`` (or integer ``day,y``). Reports are placed
  on a daily grid, days without a report are unobserved, and a reset flag
  input marks the day after each report so the case accumulator restarts.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .core import Dataset, ParameterVector, RandomStream
from .errors import DatasetError, ErrorCode, wrap_error

logger = logging.getLogger(__name__)

FORMATS = ("auto", "generic", "watertank", "dengue")
WATERTANK_SAMPLING_PERIOD = 4.0
WATERTANK_MAX_FREQUENCY = 0.0144


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------

def _read_frame(path: Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DatasetError("Dataset file not found", path=str(path))
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise DatasetError("Dataset file is empty", path=str(path)) from e
    except pd.errors.ParserError as e:
        raise wrap_error(e, ErrorCode.DATASET, "Cannot parse dataset", path=str(path)) from e
    if frame.empty:
        raise DatasetError("Dataset has a header but no rows", path=str(path))
    frame.columns = [str(c).strip() for c in frame.columns]
    return frame


def _numeric_column(frame: pd.DataFrame, column: str, path: Path, allow_missing: bool) -> np.ndarray:
    """Parse one column; the error names the 1-based file row (header is row 1) and the column."""
    raw = frame[column].str.strip()
    values = pd.to_numeric(raw.where(raw != ""), errors="coerce")
    bad = values.isna() & (raw != "")
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DatasetError("Field is not numeric", path=str(path), row=row + 2, column=column,
                           value=frame[column].iloc[row])
    if not allow_missing and values.isna().any():
        row = int(np.flatnonzero(values.isna().to_numpy())[0])
        raise DatasetError("Field must not be empty", path=str(path), row=row + 2, column=column)
    return values.to_numpy(dtype=float)


def _block(frame: pd.DataFrame, prefix: str, path: Path, allow_missing: bool) -> np.ndarray:
    if prefix in frame.columns:
        return _numeric_column(frame, prefix, path, allow_missing).reshape(-1, 1)
    names = sorted((c for c in frame.columns if c.startswith(prefix) and c[len(prefix):].isdigit()),
                   key=lambda c: int(c[len(prefix):]))
    if not names:
        return np.zeros((len(frame), 0))
    return np.column_stack([_numeric_column(frame, c, path, allow_missing) for c in names])


def detect_format(frame: pd.DataFrame) -> str:
    columns = set(frame.columns)
    if "date" in columns or "day" in columns:
        return "dengue"
    if "t" in columns:
        return "generic"
    if {"uEst", "yEst"} <= columns or columns == {"u", "y"}:
        return "watertank"
    raise DatasetError("Cannot tell the dataset layout from its header", columns=sorted(columns))


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------

def load_generic(path: Path, frame: Optional[pd.DataFrame] = None) -> Dataset:
    """Load a ``t,u,y`` CSV; empty y fields are missing observations."""
    path = Path(path)
    frame = _read_frame(path) if frame is None else frame
    observations = _block(frame, "y", path, allow_missing=True)
    if observations.shape[1] == 0:
        raise DatasetError("Dataset has no y column", path=str(path), columns=list(frame.columns))
    inputs = _block(frame, "u", path, allow_missing=False)
    stamps = frame["t"].to_numpy() if "t" in frame.columns else None
    return Dataset(inputs, observations, stamps, name=path.stem)


def shift_inputs(u: np.ndarray) -> np.ndarray:
    """Delay an input signal by one step; the first entry is repeated."""
    u = np.asarray(u, dtype=float)
    shifted = np.empty_like(u)
    shifted[0] = u[0]
    shifted[1:] = u[:-1]
    return shifted


def load_watertank(path: Path, series: str = "est", frame: Optional[pd.DataFrame] = None) -> Dataset:
    """
    Load a cascaded-tanks series.

    Args:
        path: CSV with columns ``u,y`` or ``uEst,yEst,uVal,yVal``
        series: "est" or "val" when the file holds both benchmark series

    Returns:
        Dataset with one-step-delayed inputs and timestamps in seconds
    """
    path = Path(path)
    frame = _read_frame(path) if frame is None else frame
    if {"uEst", "yEst"} <= set(frame.columns):
        suffix = {"est": "Est", "val": "Val"}.get(series)
        if suffix is None or f"u{suffix}" not in frame.columns:
            raise DatasetError("Unknown water-tank series", path=str(path), series=series)
        u_col, y_col = f"u{suffix}", f"y{suffix}"
    elif {"u", "y"} <= set(frame.columns):
        u_col, y_col = "u", "y"
    else:
        raise DatasetError("Water-tank data needs u and y columns", path=str(path), columns=list(frame.columns))
    u = _numeric_column(frame, u_col, path, allow_missing=False)
    y = _numeric_column(frame, y_col, path, allow_missing=True)
    stamps = np.arange(len(u)) * WATERTANK_SAMPLING_PERIOD
    return Dataset(shift_inputs(u).reshape(-1, 1), y.reshape(-1, 1), stamps, name=f"{path.stem}-{series}")


def reset_flags(observed: np.ndarray) -> np.ndarray:
    """Input column that is 1 on the step after each observation."""
    observed = np.asarray(observed, dtype=bool)
    flags = np.zeros((observed.size, 1))
    flags[1:, 0] = observed[:-1]
    return flags


def load_dengue(path: Path, frame: Optional[pd.DataFrame] = None) -> Dataset:
    """
    Load dated case reports onto a daily grid.

    Each report covers the new cases since the previous report, so the model's
    accumulator is reset the day after every report.

    Raises:
        DatasetError: unparsable dates, duplicate or unordered dates, negative or fractional counts
    """
    path = Path(path)
    frame = _read_frame(path) if frame is None else frame
    cases = _numeric_column(frame, "y", path, allow_missing=False)
    bad = np.flatnonzero((cases < 0) | (cases != np.round(cases)))
    if bad.size:
        raise DatasetError("Case counts must be nonnegative integers", path=str(path), row=int(bad[0]) + 2,
                           column="y", value=frame["y"].iloc[bad[0]])
    if "date" in frame.columns:
        dates = pd.to_datetime(frame["date"].str.strip(), errors="coerce")
        if dates.isna().any():
            row = int(np.flatnonzero(dates.isna().to_numpy())[0])
            raise DatasetError("Unparsable date", path=str(path), row=row + 2, column="date",
                               value=frame["date"].iloc[row])
        offsets = ((dates - dates.iloc[0]).dt.days).to_numpy()
        start = dates.iloc[0]
    else:
        days = _numeric_column(frame, "day", path, allow_missing=False)
        offsets = (days - days[0]).astype(int)
        start = None
    if np.any(np.diff(offsets) <= 0):
        row = int(np.flatnonzero(np.diff(offsets) <= 0)[0]) + 1
        raise DatasetError("Report dates must be strictly increasing", path=str(path), row=row + 2)

    T = int(offsets[-1]) + 1
    observations = np.full((T, 1), np.nan)
    observations[offsets, 0] = cases
    observed = np.zeros(T, dtype=bool)
    observed[offsets] = True
    if start is not None:
        stamps = pd.date_range(start, periods=T, freq="D").strftime("%Y-%m-%d").to_numpy()
    else:
        stamps = np.arange(T)
    logger.info("Expanded %d reports onto %d days", len(cases), T)
    return Dataset(reset_flags(observed), observations, stamps, name=path.stem)


def load_dataset(path: Path, fmt: str = "auto", series: str = "est") -> Dataset:
    """
    Load a dataset in any supported layout.

    Args:
        path: CSV file
        fmt: "auto" (from the header), "generic", "watertank" or "dengue"
        series: water-tank benchmark series ("est" or "val")

    Raises:
        DatasetError: missing, empty or malformed file
    """
    if fmt not in FORMATS:
        raise DatasetError("Unknown dataset format", format=fmt, known=list(FORMATS))
    frame = _read_frame(path)
    fmt = detect_format(frame) if fmt == "auto" else fmt
    if fmt == "watertank":
        return load_watertank(path, series, frame)
    if fmt == "dengue":
        return load_dengue(path, frame)
    return load_generic(path, frame)


def write_dataset(data: Dataset, path: Path) -> None:
    """Write the generic ``t,u,y`` layout; missing observations become empty fields."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data.to_frame().to_csv(path, index=False, float_format="%.10g", na_rep="")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass
class DatasetReport:
    """Result of ``validate_dataset``.

    Attributes:
        path: File that was checked
        model: Model id the data was checked against
        format: Detected or requested layout
        length: Number of time steps T
        observed: Number of observed steps
        missing: Number of steps without an observation
        reports: Number of rows in the file (differs from length for dated reports)
        input_dim: Input dimension
        obs_dim: Observation dimension
        totals: Per-output sum of the observed values
        stats: Per-column min / max / mean
        warnings: Non-fatal findings
    """
    path: str
    model: str
    format: str
    length: int
    observed: int
    missing: int
    reports: int
    input_dim: int
    obs_dim: int
    totals: List[float] = field(default_factory=list)
    stats: Dict[str, Dict[str, float]] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _column_stats(block: np.ndarray, label: str) -> Dict[str, Dict[str, float]]:
    out = {}
    for j in range(block.shape[1]):
        column = block[:, j][np.isfinite(block[:, j])]
        if column.size == 0:
            continue
        key = label if block.shape[1] == 1 else f"{label}{j}"
        out[key] = {"min": float(column.min()), "max": float(column.max()), "mean": float(column.mean())}
    return out


def validate_dataset(path: Path, model_id: str, fmt: str = "auto", series: str = "est") -> DatasetReport:
    """
    Check a dataset file against a model.

    Returns:
        DatasetReport with length, missing-observation census and summary statistics

    Raises:
        DatasetError: malformed file (with row / column) or data the model cannot use
        ConfigError: unknown model id
    """
    from .systems.registry import ModelRegistry

    path = Path(path)
    model = ModelRegistry().build(model_id)
    frame = _read_frame(path)
    resolved = detect_format(frame) if fmt == "auto" else fmt
    data = load_dataset(path, resolved, series)
    if data.obs_dim != model.obs_dim:
        raise DatasetError("Observation dimension does not match the model", path=str(path),
                           model=model_id, expected=model.obs_dim, got=data.obs_dim)
    warnings = []
    if model_id == "dengue" and data.input_dim != 1:
        raise DatasetError("Dengue data needs the reset-flag input column", path=str(path))
    if model_id == "watertank":
        if data.input_dim != 1:
            raise DatasetError("Water-tank data needs exactly one input column", path=str(path))
        y = data.observations[data.observed_mask, 0]
        if np.any((y < 0) | (y > 10)):
            warnings.append("observations outside the sensor range [0, 10]")
    observed = data.observed_mask
    report = DatasetReport(
        path=str(path), model=model_id, format=resolved, length=data.T,
        observed=int(observed.sum()), missing=int((~observed).sum()), reports=len(frame),
        input_dim=data.input_dim, obs_dim=data.obs_dim,
        totals=[float(v) for v in np.nansum(data.observations, axis=0)],
        stats={**_column_stats(data.inputs, "u"), **_column_stats(data.observations, "y")},
        warnings=warnings,
    )
    logger.info("Validated %s: T=%d observed=%d missing=%d", path, report.length, report.observed, report.missing)
    return report


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def multisine_input(T: int, rng: RandomStream, max_frequency: float = WATERTANK_MAX_FREQUENCY,
                    sampling_period: float = WATERTANK_SAMPLING_PERIOD, level: float = 4.0,
                    amplitude: float = 1.5, components: int = 20) -> np.ndarray:
    """
    Random-phase multisine held over each sampling period, clipped at 0.

    Frequencies lie on the grid k / (T * sampling_period) below max_frequency.
    Returns a (T, 1) array whose standard deviation is ``amplitude``.
    """
    t = np.arange(T) * sampling_period
    base = 1.0 / (T * sampling_period)
    count = max(1, min(components, int(max_frequency / base)))
    freqs = base * np.arange(1, count + 1)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=count)
    signal = np.sin(2.0 * np.pi * np.outer(t, freqs) + phases).sum(axis=1)
    signal = level + amplitude * signal / max(signal.std(), 1e-12)
    return np.clip(signal, 0.0, None).reshape(-1, 1)


def simulate_dataset(model, theta: ParameterVector, T: int, rng: RandomStream,
                     inputs: Optional[np.ndarray] = None) -> Dataset:
    """
    Draw a synthetic dataset from a model.

    Water-tank models get a multisine input when none is given; the input
    draws use ``rng.split(0)`` and the model simulation ``rng.split(1)``.
    """
    if inputs is None and model.name == "watertank":
        inputs = multisine_input(T, rng.split(0))
    _, data = model.simulate(theta, T, rng.split(1), inputs)
    logger.info("Simulated %s: T=%d observed=%d", model.name, data.T, data.num_observed)
    return data


def split_dataset(data: Dataset, fractions: Sequence[float] = (0.5, 0.5)):
    """Consecutive estimation / validation split."""
    cut = int(round(fractions[0] * data.T))
    if not 0 < cut < data.T:
        raise DatasetError("Split leaves an empty part", T=data.T, cut=cut)
    return data.slice(0, cut), data.slice(cut, data.T)
