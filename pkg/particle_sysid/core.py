"""
Core types shared by every algorithm: random streams, datasets, parameter
vectors with their unconstrained transforms, priors, and the complete-data
log-density of a trajectory.
"""

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import special, stats

from .errors import CapabilityError, DatasetError, DomainError, InputError

if TYPE_CHECKING:
    from .systems.base import StateSpaceModel


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

class RandomStream:
    """
    Deterministic, splittable random stream.

    A stream is keyed by ``(seed, stream_id)`` plus the path of ``split``
    calls that produced it, and wraps a counter-based Philox generator. Any
    attribute not defined here (``normal``, ``random``, ``binomial``, ...) is
    forwarded to the underlying ``numpy.random.Generator``.

    Example:
        rng = RandomStream(seed=1)
        step_rng = rng.split(17)
        draws = step_rng.normal(size=100)
    """

    def __init__(self, seed: int, stream_id: int = 0, path: Tuple[int, ...] = ()):
        if seed < 0 or stream_id < 0:
            raise InputError("Seed and stream id must be nonnegative", seed=seed, stream_id=stream_id)
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.path = tuple(int(p) for p in path)
        sequence = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,) + self.path)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def split(self, index: int) -> "RandomStream":
        """Derive an independent child stream; the parent's state is untouched."""
        if index < 0:
            raise InputError("Split index must be nonnegative", index=index)
        return RandomStream(self.seed, self.stream_id, self.path + (int(index),))

    def with_stream_id(self, stream_id: int) -> "RandomStream":
        return RandomStream(self.seed, stream_id, self.path)

    def __getattr__(self, name: str) -> Any:
        if name == "generator":
            raise AttributeError(name)
        return getattr(self.generator, name)

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id}, path={self.path})"


def as_stream(rng: Any) -> RandomStream:
    """Accept a RandomStream or an integer seed."""
    if isinstance(rng, RandomStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RandomStream(int(rng))
    raise InputError("Expected a RandomStream or an integer seed", got=type(rng).__name__)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def _as_matrix(values: Any, length: Optional[int], label: str) -> np.ndarray:
    array = np.asarray(values, dtype=float)
    if array.ndim == 1:
        array = array.reshape(-1, 1) if array.size else array.reshape(length or 0, 0)
    if array.ndim != 2:
        raise DatasetError(f"{label} must be a 1-D or 2-D array", shape=array.shape)
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Input/output record of length T.

    Attributes:
        inputs: (T, du) float array; du may be 0
        observations: (T, dy) float array, rows containing NaN are unobserved
        timestamps: optional per-step labels (dates, sample times)
        name: label used in logs and manifests
    """
    inputs: np.ndarray
    observations: np.ndarray
    timestamps: Optional[np.ndarray] = None
    name: str = "dataset"

    def __post_init__(self):
        observations = _as_matrix(self.observations, None, "observations")
        T = observations.shape[0]
        if self.inputs is None:
            inputs = np.zeros((T, 0))
        else:
            inputs = _as_matrix(self.inputs, T, "inputs")
        if T == 0:
            raise DatasetError("Dataset has no time steps", name=self.name)
        if inputs.shape[0] != T:
            raise DatasetError(
                "Inputs and observations must have the same length",
                inputs=inputs.shape[0], observations=T,
            )
        if np.any(~np.isfinite(inputs)):
            raise DatasetError("Inputs must be finite", name=self.name)
        if not np.any(np.all(np.isfinite(observations), axis=1)):
            raise DatasetError("Dataset contains no observations", name=self.name)
        inputs.setflags(write=False)
        observations.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "observations", observations)
        if self.timestamps is not None:
            stamps = np.asarray(self.timestamps)
            if stamps.shape[0] != T:
                raise DatasetError("Timestamps must have length T", timestamps=stamps.shape[0], T=T)
            object.__setattr__(self, "timestamps", stamps)

    @property
    def T(self) -> int:
        return self.observations.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def observed_mask(self) -> np.ndarray:
        return np.all(np.isfinite(self.observations), axis=1)

    @property
    def num_observed(self) -> int:
        return int(self.observed_mask.sum())

    def is_observed(self, t: int) -> bool:
        return bool(np.all(np.isfinite(self.observations[t])))

    def u(self, t: int) -> np.ndarray:
        return self.inputs[t]

    def y(self, t: int) -> np.ndarray:
        return self.observations[t]

    def slice(self, start: int, stop: int) -> "Dataset":
        stamps = None if self.timestamps is None else self.timestamps[start:stop]
        return Dataset(self.inputs[start:stop].copy(), self.observations[start:stop].copy(), stamps, self.name)

    def to_frame(self) -> pd.DataFrame:
        """Tabular form with columns t, u / u0.., y / y0.. as written to CSV."""
        columns: Dict[str, Any] = {
            "t": self.timestamps if self.timestamps is not None else np.arange(1, self.T + 1)
        }
        for label, block in (("u", self.inputs), ("y", self.observations)):
            if block.shape[1] == 1:
                columns[label] = block[:, 0]
            else:
                for j in range(block.shape[1]):
                    columns[f"{label}{j}"] = block[:, j]
        return pd.DataFrame(columns)


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------

INF = math.inf


@dataclass(frozen=True)
class _Transform:
    """Bijection between a bounded interval and the real line."""
    lower: float
    upper: float

    @property
    def kind(self) -> str:
        lo_finite, hi_finite = math.isfinite(self.lower), math.isfinite(self.upper)
        if lo_finite and hi_finite:
            return "logit"
        if lo_finite:
            return "log"
        if hi_finite:
            return "neglog"
        return "identity"

    def forward(self, value: float) -> float:
        kind = self.kind
        if kind == "log":
            return math.log(value - self.lower)
        if kind == "neglog":
            return math.log(self.upper - value)
        if kind == "logit":
            return float(special.logit((value - self.lower) / (self.upper - self.lower)))
        return float(value)

    def inverse(self, eta: float) -> float:
        kind = self.kind
        if kind == "log":
            return self.lower + math.exp(eta)
        if kind == "neglog":
            return self.upper - math.exp(eta)
        if kind == "logit":
            return self.lower + (self.upper - self.lower) * float(special.expit(eta))
        return float(eta)

    def derivatives(self, eta: float) -> Tuple[float, float]:
        """First and second derivative of the inverse map at eta."""
        kind = self.kind
        if kind == "log":
            e = math.exp(eta)
            return e, e
        if kind == "neglog":
            e = math.exp(eta)
            return -e, -e
        if kind == "logit":
            s = float(special.expit(eta))
            width = self.upper - self.lower
            first = width * s * (1.0 - s)
            return first, first * (1.0 - 2.0 * s)
        return 1.0, 0.0

    def log_abs_jacobian(self, eta: float) -> float:
        kind = self.kind
        if kind in ("log", "neglog"):
            return float(eta)
        if kind == "logit":
            return math.log(self.upper - self.lower) - float(np.logaddexp(0.0, -eta)) - float(np.logaddexp(0.0, eta))
        return 0.0


@dataclass(frozen=True)
class ParameterVector:
    """
    Named parameter values with bounds and a free (learnable) subset.

    Values on the boundary of their interval are allowed for fixed
    parameters; free parameters must lie in the open interior so that the
    unconstrained transform is defined.

    Attributes:
        values: parameter name -> value
        bounds: parameter name -> (lower, upper); missing names are unbounded
        free: names that learners may change, in a fixed order
    """
    values: Mapping[str, float]
    bounds: Mapping[str, Tuple[float, float]] = field(default_factory=dict)
    free: Tuple[str, ...] = ()

    def __post_init__(self):
        values = {name: float(v) for name, v in self.values.items()}
        bounds = {name: (float(lo), float(hi)) for name, (lo, hi) in self.bounds.items()}
        free = tuple(self.free)
        for name in free:
            if name not in values:
                raise InputError("Free parameter has no value", parameter=name)
        for name, value in values.items():
            lo, hi = bounds.get(name, (-INF, INF))
            if not lo <= value <= hi:
                raise DomainError("Parameter outside its bounds", parameter=name, value=value, bounds=(lo, hi))
            if name in free and not lo < value < hi:
                raise DomainError("Free parameter must lie inside its bounds", parameter=name, value=value)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "free", free)

    def __getitem__(self, name: str) -> float:
        try:
            return self.values[name]
        except KeyError:
            raise InputError("Unknown parameter", parameter=name) from None

    def __contains__(self, name: str) -> bool:
        return name in self.values

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(self.values)

    def transform(self, name: str) -> _Transform:
        lo, hi = self.bounds.get(name, (-INF, INF))
        return _Transform(lo, hi)

    def as_array(self, names: Optional[Sequence[str]] = None) -> np.ndarray:
        names = self.free if names is None else names
        return np.array([self[name] for name in names], dtype=float)

    def replace(self, **values: float) -> "ParameterVector":
        merged = dict(self.values)
        merged.update(values)
        return ParameterVector(merged, self.bounds, self.free)

    def with_free(self, free: Iterable[str]) -> "ParameterVector":
        return ParameterVector(self.values, self.bounds, tuple(free))

    def clipped(self, **values: float) -> "ParameterVector":
        """Like ``replace`` but pulls free values strictly inside their bounds."""
        fixed = {}
        for name, value in values.items():
            lo, hi = self.bounds.get(name, (-INF, INF))
            margin = 1e-10 * max(1.0, abs(value))
            fixed[name] = float(np.clip(value, lo + margin, hi - margin))
        return self.replace(**fixed)

    def to_unconstrained(self) -> np.ndarray:
        return np.array([self.transform(name).forward(self[name]) for name in self.free], dtype=float)

    def from_unconstrained(self, eta: Sequence[float]) -> "ParameterVector":
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (len(self.free),):
            raise InputError("Unconstrained vector has the wrong length", expected=len(self.free), got=eta.shape)
        updates = {}
        for name, value in zip(self.free, eta):
            theta = self.transform(name).inverse(float(value))
            lo, hi = self.bounds.get(name, (-INF, INF))
            # keep round-off from landing exactly on a bound
            updates[name] = float(np.clip(theta, np.nextafter(lo, INF), np.nextafter(hi, -INF)))
        return self.replace(**updates)

    def log_jacobian(self, eta: Optional[Sequence[float]] = None) -> float:
        """log |d theta / d eta| summed over free parameters."""
        eta = self.to_unconstrained() if eta is None else np.asarray(eta, dtype=float)
        return float(sum(self.transform(name).log_abs_jacobian(float(e)) for name, e in zip(self.free, eta)))

    def chain_rule(self, grad: np.ndarray, hess: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """
        Map a score (and Hessian) in theta over ``free`` to the unconstrained scale.

        Args:
            grad: gradient with respect to the free parameters, theta scale
            hess: optional Hessian, theta scale

        Returns:
            (gradient, Hessian) with respect to eta
        """
        eta = self.to_unconstrained()
        first = np.empty(len(self.free))
        second = np.empty(len(self.free))
        for i, name in enumerate(self.free):
            first[i], second[i] = self.transform(name).derivatives(float(eta[i]))
        grad_eta = np.asarray(grad, dtype=float) * first
        if hess is None:
            return grad_eta, None
        hess_eta = np.asarray(hess, dtype=float) * np.outer(first, first) + np.diag(np.asarray(grad) * second)
        return grad_eta, hess_eta

    def to_dict(self) -> Dict[str, float]:
        return dict(self.values)


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Beta:
    alpha: float
    beta: float
    tag = "beta"

    def logpdf(self, x: float) -> float:
        return float(stats.beta.logpdf(x, self.alpha, self.beta))

    def sample(self, rng: RandomStream) -> float:
        return float(rng.beta(self.alpha, self.beta))

    @property
    def support(self) -> Tuple[float, float]:
        return (0.0, 1.0)


@dataclass(frozen=True)
class InverseGamma:
    a: float
    b: float
    tag = "invgamma"

    def logpdf(self, x: float) -> float:
        return float(stats.invgamma.logpdf(x, self.a, scale=self.b))

    def sample(self, rng: RandomStream) -> float:
        return float(self.b / rng.gamma(self.a))

    @property
    def support(self) -> Tuple[float, float]:
        return (0.0, INF)


@dataclass(frozen=True)
class Gaussian:
    mean: float
    var: float
    tag = "gaussian"

    def logpdf(self, x: float) -> float:
        return float(stats.norm.logpdf(x, self.mean, math.sqrt(self.var)))

    def sample(self, rng: RandomStream) -> float:
        return float(rng.normal(self.mean, math.sqrt(self.var)))

    @property
    def support(self) -> Tuple[float, float]:
        return (-INF, INF)


@dataclass(frozen=True)
class Uniform:
    lower: float
    upper: float
    tag = "uniform"

    def logpdf(self, x: float) -> float:
        return float(stats.uniform.logpdf(x, self.lower, self.upper - self.lower))

    def sample(self, rng: RandomStream) -> float:
        return float(rng.uniform(self.lower, self.upper))

    @property
    def support(self) -> Tuple[float, float]:
        return (self.lower, self.upper)


@dataclass(frozen=True)
class PointMass:
    value: float
    tag = "pointmass"

    def logpdf(self, x: float) -> float:
        return 0.0 if x == self.value else -INF

    def sample(self, rng: RandomStream) -> float:
        return float(self.value)

    @property
    def support(self) -> Tuple[float, float]:
        return (self.value, self.value)


_DISTRIBUTIONS = {
    "beta": (Beta, ("alpha", "beta")),
    "invgamma": (InverseGamma, ("a", "b")),
    "gaussian": (Gaussian, ("mean", "var")),
    "uniform": (Uniform, ("lower", "upper")),
    "pointmass": (PointMass, ("value",)),
}


def distribution_from_dict(data: Mapping[str, Any]):
    """Build a marginal from ``{"dist": "beta", "alpha": 1, "beta": 1}``."""
    data = dict(data)
    tag = str(data.pop("dist", "")).lower()
    if tag not in _DISTRIBUTIONS:
        raise InputError("Unknown prior distribution", dist=tag, known=sorted(_DISTRIBUTIONS))
    cls, fields = _DISTRIBUTIONS[tag]
    missing = [name for name in fields if name not in data]
    if missing:
        raise InputError("Prior is missing hyperparameters", dist=tag, missing=missing)
    return cls(*(float(data[name]) for name in fields))


def distribution_to_dict(dist) -> Dict[str, Any]:
    cls, fields = _DISTRIBUTIONS[dist.tag]
    out: Dict[str, Any] = {"dist": dist.tag}
    out.update({name: getattr(dist, name) for name in fields})
    return out


@dataclass(frozen=True)
class Prior:
    """Product prior: parameter name -> marginal distribution."""
    marginals: Mapping[str, Any]

    def __getitem__(self, name: str):
        return self.marginals[name]

    def __contains__(self, name: str) -> bool:
        return name in self.marginals

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(self.marginals)

    def free_names(self) -> Tuple[str, ...]:
        return tuple(name for name, dist in self.marginals.items() if not isinstance(dist, PointMass))

    def sample(self, rng: RandomStream) -> Dict[str, float]:
        return {name: dist.sample(rng) for name, dist in self.marginals.items()}

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: distribution_to_dict(dist) for name, dist in self.marginals.items()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, Any]]) -> "Prior":
        return cls({name: distribution_from_dict(spec) for name, spec in data.items()})


def prior_logpdf(prior: Prior, theta: ParameterVector) -> float:
    """
    Joint prior log-density, the sum of the marginals.

    Raises:
        InputError: a prior parameter has no value in theta
    """
    total = 0.0
    for name, dist in prior.marginals.items():
        if name not in theta:
            raise InputError("Parameter missing for prior evaluation", parameter=name)
        value = dist.logpdf(theta[name])
        if not value > -INF:
            return -INF
        total += value
    return total


def mode_matched_beta(mean_time: float) -> Tuple[float, float]:
    """
    Beta(alpha, beta) with alpha + beta = 4 whose mode is 1 / mean_time.

    Raises:
        DomainError: mean_time <= 2
    """
    if not mean_time > 2.0:
        raise DomainError("Mean time must exceed 2 for a mode-matched beta", mean_time=mean_time)
    return 1.0 + 2.0 / mean_time, 3.0 - 2.0 / mean_time


# ---------------------------------------------------------------------------
# Complete-data log-density
# ---------------------------------------------------------------------------

def log_joint(model: "StateSpaceModel", traj: np.ndarray, data: Dataset, theta: ParameterVector) -> float:
    """
    ln p(x_1:T, y_1:T | theta) for a single trajectory.

    Unobserved steps contribute no observation term.

    Raises:
        InputError: trajectory shape does not match (T, state_dim)
        CapabilityError: the model has no tractable initial or transition density
    """
    traj = np.asarray(traj)
    if traj.ndim == 1 and model.state_dim == 1:
        traj = traj.reshape(-1, 1)
    if traj.shape != (data.T, model.state_dim):
        raise InputError(
            "Trajectory does not match the dataset",
            expected=(data.T, model.state_dim), got=traj.shape,
        )
    for feature in ("initial_density", "transition_density"):
        if not model.supports_feature(feature):
            raise CapabilityError(f"log_joint needs a model with {feature.replace('_', ' ')}", model=model.name)

    total = float(model.initial_logpdf(traj[0:1], theta, data=data)[0])
    for t in range(data.T):
        if t > 0:
            total += float(model.transition_logpdf(traj[t:t + 1], traj[t - 1:t], data.u(t), t, theta)[0])
        if data.is_observed(t):
            total += float(model.observation_logpdf(data.y(t), traj[t:t + 1], data.u(t), t, theta)[0])
        if total == -INF:
            return -INF
    return total
