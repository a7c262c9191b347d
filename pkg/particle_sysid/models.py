"""Result records for learners, chains and experiment runs."""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .core import ParameterVector
from .errors import DomainError, InputError
from .estimators import integrated_autocorrelation_time
from .utils import write_jsonl


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


@dataclass
class TraceRecord:
    """One learner iteration.

    Attributes:
        iteration: Iteration counter (0 is the starting point)
        theta: Parameter values after the iteration
        logz: Log-likelihood (estimate or exact) at theta; NaN when not evaluated
        step_length: Accepted step length, or the step-size gamma_k for PSAEM
        accepted: Whether the proposed update was taken
    """
    iteration: int
    theta: Dict[str, float]
    logz: float = math.nan
    step_length: float = math.nan
    accepted: bool = True

    def to_row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {"iter": self.iteration}
        row.update(self.theta)
        row.update({"logZ": self.logz, "step_length": self.step_length, "accepted": self.accepted})
        return row


@dataclass
class LearnerTrace:
    """Per-iteration history of a frequentist learner."""
    records: List[TraceRecord] = field(default_factory=list)

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> TraceRecord:
        return self.records[index]

    def values(self, name: str) -> np.ndarray:
        return np.array([record.theta[name] for record in self.records])

    def to_frame(self) -> pd.DataFrame:
        """Columns: iter, theta components, logZ, step_length, accepted."""
        return pd.DataFrame([record.to_row() for record in self.records])

    def to_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.10g")


@dataclass
class SearchState:
    """
    State of the gradient/Newton search.

    Attributes:
        theta: Current iterate
        step_length: Initial step length for the next line search (> 0)
        direction: Last search direction (theta scale, over theta.free)
        scaling: Last negative-definite Hessian used for scaling (optional)
        iteration: Iteration counter
        trace: History of (theta, logZ, step, accepted)
    """
    theta: ParameterVector
    step_length: float = 1.0
    direction: Optional[np.ndarray] = None
    scaling: Optional[np.ndarray] = None
    iteration: int = 0
    trace: LearnerTrace = field(default_factory=LearnerTrace)
    stopped: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "theta": self.theta.to_dict(),
            "free": list(self.theta.free),
            "iterations": self.iteration,
            "step_length": self.step_length,
            "stopped": self.stopped,
        }


@dataclass
class EmState:
    """
    State of exact EM or PSAEM.

    Attributes:
        theta: Current iterate
        iteration: Iteration counter
        statistics: Stochastic-approximation statistics (PSAEM with closed-form M-step)
        paths: Retained weighted trajectories (M, T, d) for numeric M-steps
        weights: Weights of the retained trajectories, summing to 1
        reference: Conditional-SMC reference trajectory
        trace: History of (theta, logZ, gamma_k)
    """
    theta: ParameterVector
    iteration: int = 0
    statistics: Optional[Dict[str, np.ndarray]] = None
    paths: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    reference: Optional[np.ndarray] = None
    trace: LearnerTrace = field(default_factory=LearnerTrace)

    def to_dict(self) -> Dict[str, Any]:
        return {"theta": self.theta.to_dict(), "free": list(self.theta.free), "iterations": self.iteration}


@dataclass
class ChainTrace:
    """
    Samples of an MCMC chain.

    Attributes:
        param_names: Names of the sampled parameters, in column order
        thetas: Parameter samples theta(m)
        log_target: Log-target (or log-likelihood estimate plus log-prior) per sample
        logz: Log-likelihood or its estimate carried with each sample
        accepted: Accept flags; for MH-type chains a rejection repeats the previous sample
        trajectories: Optional state trajectories x_1:T(m)
        seed: Seed of the chain
        config: Snapshot of the settings the chain ran with
    """
    param_names: Sequence[str]
    thetas: List[Dict[str, float]] = field(default_factory=list)
    log_target: List[float] = field(default_factory=list)
    logz: List[float] = field(default_factory=list)
    accepted: List[bool] = field(default_factory=list)
    trajectories: Optional[List[np.ndarray]] = None
    seed: Optional[int] = None
    config: Dict[str, Any] = field(default_factory=dict)

    def append(self, theta: ParameterVector, log_target: float, accepted: bool, logz: float = math.nan,
               trajectory: Optional[np.ndarray] = None) -> None:
        self.thetas.append({name: theta[name] for name in self.param_names})
        self.log_target.append(float(log_target))
        self.logz.append(float(logz))
        self.accepted.append(bool(accepted))
        if self.trajectories is not None and trajectory is not None:
            self.trajectories.append(np.array(trajectory, copy=True))

    def __len__(self) -> int:
        return len(self.thetas)

    def default_burn_in(self) -> int:
        return len(self) // 10

    def resolve_burn_in(self, burn_in: Optional[int]) -> int:
        burn_in = self.default_burn_in() if burn_in is None else int(burn_in)
        if not 0 <= burn_in < len(self):
            raise InputError("Burn-in must leave at least one sample", burn_in=burn_in, length=len(self))
        return burn_in

    def samples(self, name: str, burn_in: int = 0) -> np.ndarray:
        if name not in self.param_names:
            raise InputError("Parameter not in chain", parameter=name, known=list(self.param_names))
        return np.array([theta[name] for theta in self.thetas[burn_in:]])

    def as_array(self, burn_in: int = 0) -> np.ndarray:
        """(M - burn_in, p) sample matrix."""
        return np.array([[theta[name] for name in self.param_names] for theta in self.thetas[burn_in:]])

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if self.accepted else math.nan

    def summary(self, burn_in: Optional[int] = None) -> Dict[str, Dict[str, Optional[float]]]:
        """
        Posterior summaries per parameter after discarding burn_in samples (default M/10).

        Returns:
            name -> {mean, sd, q025, q05, q25, median, q75, q95, q975, iact, ess}; iact and ess are
            None for a constant chain
        """
        burn_in = self.resolve_burn_in(burn_in)
        out = {}
        for name in self.param_names:
            x = self.samples(name, burn_in)
            q = np.quantile(x, [0.025, 0.05, 0.25, 0.5, 0.75, 0.95, 0.975])
            try:
                iact = integrated_autocorrelation_time(x) if x.size > 1 else math.nan
            except DomainError:
                iact = math.nan
            out[name] = {
                "mean": float(x.mean()),
                "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
                "q025": float(q[0]), "q05": float(q[1]), "q25": float(q[2]), "median": float(q[3]),
                "q75": float(q[4]), "q95": float(q[5]), "q975": float(q[6]),
                "iact": _finite_or_none(iact),
                "ess": _finite_or_none(x.size / iact) if math.isfinite(iact) else None,
            }
        return out

    def summary_frame(self, burn_in: Optional[int] = None) -> pd.DataFrame:
        frame = pd.DataFrame.from_dict(self.summary(burn_in), orient="index")
        frame.index.name = "parameter"
        return frame.reset_index()

    def to_jsonl(self, path: Path) -> None:
        """One record per iteration: m, theta, log_target, logZ, accepted."""
        write_jsonl(path, (
            {
                "m": m,
                "theta": self.thetas[m],
                "log_target": _finite_or_none(self.log_target[m]),
                "logZ": _finite_or_none(self.logz[m]),
                "accepted": self.accepted[m],
            }
            for m in range(len(self))
        ))

    @classmethod
    def from_jsonl(cls, path: Path, seed: Optional[int] = None) -> "ChainTrace":
        thetas, log_target, logz, accepted = [], [], [], []
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                thetas.append({k: float(v) for k, v in record["theta"].items()})
                log_target.append(math.nan if record.get("log_target") is None else record["log_target"])
                logz.append(math.nan if record.get("logZ") is None else record["logZ"])
                accepted.append(bool(record["accepted"]))
        if not thetas:
            raise InputError("Chain trace file is empty", path=str(path))
        return cls(tuple(thetas[0]), thetas, log_target, logz, accepted, seed=seed)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "param_names": list(self.param_names),
            "length": len(self),
            "acceptance_rate": _finite_or_none(self.acceptance_rate),
            "seed": self.seed,
            "config": self.config,
        }


@dataclass
class RunResult:
    """Outcome of one experiment run.

    Attributes:
        algorithm: Algorithm id
        model: Model id
        status: "success" or "failed"
        theta: Final parameter values (learners) or last sample (chains)
        metrics: logZ, e_RMS, acceptance rate and other scalar results
        posterior: Per-parameter posterior summaries for Bayesian algorithms
        artifacts: Files written, relative to the run directory
        exit_code: Process exit code the CLI reports
        error: Structured error record when the run failed
    """
    algorithm: str = ""
    model: str = ""
    status: str = "success"
    theta: Dict[str, float] = field(default_factory=dict)
    metrics: Dict[str, Any] = field(default_factory=dict)
    posterior: Optional[Dict[str, Dict[str, Optional[float]]]] = None
    artifacts: List[str] = field(default_factory=list)
    exit_code: int = 0
    error: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        result = asdict(self)
        if result["posterior"] is None:
            del result["posterior"]
        if result["error"] is None:
            del result["error"]
        return result
