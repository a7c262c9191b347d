"""Run-directory helpers and JSON persistence."""

import json
import logging
import math
import shutil
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping

import numpy as np

from .errors import ErrorCode, OutputExistsError, wrap_error

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"
TIMING_FILE = "timing.json"


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays to plain Python; non-finite floats become None."""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path: Path, data: Any) -> None:
    """Write sorted, indented JSON so reruns produce identical bytes."""
    text = json.dumps(to_jsonable(data), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise wrap_error(e, ErrorCode.FILE_IO, "Cannot read JSON file", path=str(path)) from e


def write_jsonl(path: Path, records: Iterable[Mapping[str, Any]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(to_jsonable(record), sort_keys=True) + "\n")


def prepare_run_directory(root: Path, name: str, force: bool = False) -> Path:
    """
    Create ``root/name`` for a new run.

    A directory that already holds a manifest is a finished run: it is kept
    unless ``force`` is set, in which case its contents are removed.

    Raises:
        OutputExistsError: the run directory holds results and force is False
    """
    run_dir = Path(root) / name
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise OutputExistsError("Run directory already holds results", path=str(run_dir))
        if not (run_dir / MANIFEST_FILE).exists():
            raise OutputExistsError("Refusing to clear a directory that is not a run directory",
                                    path=str(run_dir))
        logger.warning("Overwriting run directory %s", run_dir)
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def scan_run_directory(run_dir: Path) -> Dict[str, Any]:
    """
    Collect the files of a run directory.

    Returns:
        manifest / summary / timing paths (or None), plus sorted lists of
        learner traces (CSV), chain traces and SMC diagnostics (JSONL).
    """
    run_dir = Path(run_dir)
    result: Dict[str, Any] = {
        "manifest": None,
        "summary": None,
        "timing": None,
        "learner_traces": [],
        "chain_traces": [],
        "diagnostics": [],
        "other": [],
    }
    if not run_dir.exists():
        return result
    for file in sorted(run_dir.iterdir()):
        if not file.is_file():
            continue
        if file.name == MANIFEST_FILE:
            result["manifest"] = str(file)
        elif file.name == SUMMARY_FILE:
            result["summary"] = str(file)
        elif file.name == TIMING_FILE:
            result["timing"] = str(file)
        elif file.name.startswith("chain") and file.suffix == ".jsonl":
            result["chain_traces"].append(str(file))
        elif file.name.startswith("diagnostics") and file.suffix == ".jsonl":
            result["diagnostics"].append(str(file))
        elif file.suffix == ".csv":
            result["learner_traces"].append(str(file))
        else:
            result["other"].append(str(file))
    return result


def package_version() -> str:
    from . import __version__

    return __version__
