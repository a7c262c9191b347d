"""
Base state-space model interface.

This module defines the abstract base class for every model the algorithms
operate on. Models are vectorized over a leading particle axis: a batch of
states is an ``(N, state_dim)`` array (float for continuous models, int64
for counted-state models). Optional features (tractable densities, parameter
gradients, linearizations, sufficient statistics, parameter conditionals) are
advertised through ``supports_feature`` so that algorithms can refuse models
that lack what they need before running.
"""

import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, FrozenSet, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..core import Dataset, ParameterVector, Prior, RandomStream
from ..errors import CapabilityError

logger = logging.getLogger(__name__)

FEATURES: Tuple[str, ...] = (
    "initial_density",
    "transition_density",
    "grad_logs",
    "linearization",
    "sufficient_statistics",
    "parameter_conditional",
    "exact_likelihood",
)

Derivatives = Tuple[np.ndarray, np.ndarray]


class StateSpaceModel(ABC):
    """Abstract base class for probabilistic state-space models."""

    name: str = "model"
    state_dim: int = 1
    obs_dim: int = 1
    state_dtype: type = float
    state_labels: Optional[Tuple[str, ...]] = None
    param_names: Tuple[str, ...] = ()
    features: FrozenSet[str] = frozenset()

    def __init__(self, **options: Any):
        """
        Initialize the model.

        Args:
            **options: Model-specific options (recorded in run manifests)
        """
        self.options: Dict[str, Any] = dict(options)

    # ------------------------------------------------------------------
    # Required interface
    # ------------------------------------------------------------------

    @abstractmethod
    def sample_initial(self, theta: ParameterVector, n: int, rng: RandomStream,
                       data: Optional[Dataset] = None) -> np.ndarray:
        """
        Draw n initial states.

        Args:
            theta: Model parameters
            n: Number of states to draw
            rng: Random stream
            data: Dataset being filtered, for models whose initial law depends on it

        Returns:
            (n, state_dim) array
        """

    @abstractmethod
    def sample_transition(self, x_prev: np.ndarray, u: np.ndarray, t: int,
                          theta: ParameterVector, rng: RandomStream) -> np.ndarray:
        """Propagate a batch of states from step t-1 to step t."""

    @abstractmethod
    def observation_logpdf(self, y: np.ndarray, x: np.ndarray, u: np.ndarray, t: int,
                           theta: ParameterVector) -> np.ndarray:
        """ln p(y_t | x_t) for every state in the batch; returns shape (n,)."""

    @abstractmethod
    def sample_observation(self, x: np.ndarray, u: np.ndarray, t: int,
                           theta: ParameterVector, rng: RandomStream) -> np.ndarray:
        """Draw observations for a batch of states; returns (n, obs_dim)."""

    @abstractmethod
    def default_parameters(self) -> Dict[str, float]:
        """Parameter values used when a config does not set them."""

    def parameter_bounds(self) -> Dict[str, Tuple[float, float]]:
        return {}

    def default_prior(self) -> Optional[Prior]:
        return None

    def default_free(self) -> Tuple[str, ...]:
        """Parameters learned when a config does not list them; point-mass priors pin a parameter."""
        prior = self.default_prior()
        pinned = set() if prior is None else set(prior.names) - set(prior.free_names())
        return tuple(name for name in self.param_names if name not in pinned)

    # ------------------------------------------------------------------
    # Optional densities
    # ------------------------------------------------------------------

    def initial_logpdf(self, x: np.ndarray, theta: ParameterVector,
                       data: Optional[Dataset] = None) -> np.ndarray:
        raise self._missing("initial_density")

    def transition_logpdf(self, x: np.ndarray, x_prev: np.ndarray, u: np.ndarray, t: int,
                          theta: ParameterVector) -> np.ndarray:
        """ln p(x_t | x_{t-1}); x and x_prev broadcast against each other."""
        raise self._missing("transition_density")

    # ------------------------------------------------------------------
    # Optional parameter derivatives (first and second order, theta scale)
    # ------------------------------------------------------------------

    def observation_derivatives(self, y: np.ndarray, x: np.ndarray, u: np.ndarray, t: int,
                                theta: ParameterVector, names: Sequence[str]) -> Derivatives:
        raise self._missing("grad_logs")

    def transition_derivatives(self, x: np.ndarray, x_prev: np.ndarray, u: np.ndarray, t: int,
                               theta: ParameterVector, names: Sequence[str]) -> Derivatives:
        raise self._missing("grad_logs")

    def initial_derivatives(self, x: np.ndarray, theta: ParameterVector, names: Sequence[str],
                            data: Optional[Dataset] = None) -> Derivatives:
        """Initial laws are parameter-free unless a model overrides this."""
        n, p = x.shape[0], len(names)
        return np.zeros((n, p)), np.zeros((n, p, p))

    # ------------------------------------------------------------------
    # Optional linearization hooks (extended Kalman twisting, noise-free rollout)
    # ------------------------------------------------------------------

    def transition_mean(self, x_prev: np.ndarray, u: np.ndarray, t: int, theta: ParameterVector) -> np.ndarray:
        raise self._missing("linearization")

    def transition_jacobian(self, x_prev: np.ndarray, u: np.ndarray, t: int, theta: ParameterVector) -> np.ndarray:
        """(d, d) Jacobian of the transition mean at a single state."""
        raise self._missing("linearization")

    def transition_covariance(self, theta: ParameterVector) -> np.ndarray:
        raise self._missing("linearization")

    def observation_mean(self, x: np.ndarray, u: np.ndarray, t: int, theta: ParameterVector) -> np.ndarray:
        raise self._missing("linearization")

    def observation_jacobian(self, x: np.ndarray, u: np.ndarray, t: int, theta: ParameterVector) -> np.ndarray:
        raise self._missing("linearization")

    def observation_covariance(self, theta: ParameterVector) -> np.ndarray:
        raise self._missing("linearization")

    def initial_moments(self, theta: ParameterVector, data: Optional[Dataset] = None) -> Tuple[np.ndarray, np.ndarray]:
        raise self._missing("linearization")

    # ------------------------------------------------------------------
    # Optional learning hooks
    # ------------------------------------------------------------------

    def complete_data_statistics(self, paths: np.ndarray, weights: np.ndarray, data: Dataset,
                                 theta: ParameterVector) -> Dict[str, np.ndarray]:
        """Weighted sufficient statistics of trajectories, paths shaped (M, T, d)."""
        raise self._missing("sufficient_statistics")

    def maximize_statistics(self, statistics: Mapping[str, np.ndarray], theta: ParameterVector) -> ParameterVector:
        """Closed-form maximizer of the expected complete-data log-likelihood over theta.free."""
        raise self._missing("sufficient_statistics")

    def parameter_conditional(self, path: np.ndarray, data: Dataset, theta: ParameterVector,
                              prior: Prior, rng: RandomStream) -> ParameterVector:
        """Draw theta.free from p(theta | x_1:T, y_1:T)."""
        raise self._missing("parameter_conditional")

    def exact_loglik(self, data: Dataset, theta: ParameterVector) -> float:
        raise self._missing("exact_likelihood")

    # ------------------------------------------------------------------
    # Capabilities
    # ------------------------------------------------------------------

    def supports_feature(self, feature: str) -> bool:
        """
        Check if the model supports a specific feature.

        Args:
            feature: One of FEATURES (e.g. "transition_density", "grad_logs")

        Returns:
            True if feature is supported, False otherwise
        """
        return feature in self.features

    def get_capabilities(self) -> Dict[str, bool]:
        """
        Get all capabilities of this model.

        Returns:
            Dictionary mapping feature names to support status
        """
        return {feature: self.supports_feature(feature) for feature in FEATURES}

    def require(self, feature: str, algorithm: Optional[str] = None) -> None:
        """Raise CapabilityError unless the feature is supported."""
        if not self.supports_feature(feature):
            raise self._missing(feature, algorithm)

    def _missing(self, feature: str, algorithm: Optional[str] = None) -> CapabilityError:
        label = feature.replace("_", " ")
        context: Dict[str, Any] = {"model": self.name, "feature": feature}
        if algorithm:
            context["algorithm"] = algorithm
        return CapabilityError(f"{label} unavailable", **context)

    # ------------------------------------------------------------------
    # Helpers shared by all models
    # ------------------------------------------------------------------

    def parameters(self, values: Optional[Mapping[str, float]] = None,
                   free: Optional[Sequence[str]] = None) -> ParameterVector:
        """ParameterVector with defaults, overrides and bounds for this model."""
        merged = self.default_parameters()
        if values:
            merged.update({name: float(v) for name, v in values.items()})
        return ParameterVector(merged, self.parameter_bounds(), tuple(free or ()))

    def observation_schedule(self, inputs: np.ndarray) -> np.ndarray:
        """Steps at which simulated data carry an observation."""
        return np.ones(inputs.shape[0], dtype=bool)

    def simulate(self, theta: ParameterVector, T: int, rng: RandomStream,
                 inputs: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Dataset]:
        """
        Draw a state trajectory and a dataset from the model.

        Args:
            theta: Model parameters
            T: Number of steps
            rng: Random stream
            inputs: Optional (T, du) input signal

        Returns:
            (states (T, state_dim), Dataset)
        """
        inputs = np.zeros((T, 0)) if inputs is None else np.asarray(inputs, dtype=float).reshape(T, -1)
        states = np.zeros((T, self.state_dim), dtype=self.state_dtype)
        observations = np.full((T, self.obs_dim), np.nan)
        schedule = self.observation_schedule(inputs)
        x = self.sample_initial(theta, 1, rng.split(0))
        for t in range(T):
            step_rng = rng.split(t + 1)
            if t > 0:
                x = self.sample_transition(x, inputs[t], t, theta, step_rng)
            states[t] = x[0]
            if schedule[t]:
                observations[t] = self.sample_observation(x, inputs[t], t, theta, step_rng)[0]
        return states, Dataset(inputs, observations, name=f"{self.name}-simulated")

    def simulate_mean(self, x1: np.ndarray, inputs: np.ndarray, theta: ParameterVector) -> np.ndarray:
        """Noise-free rollout of the mean maps from x1; returns predicted outputs (T, obs_dim)."""
        inputs = np.asarray(inputs, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs.reshape(-1, 1)
        T = inputs.shape[0]
        predictions = np.zeros((T, self.obs_dim))
        x = np.asarray(x1, dtype=float).reshape(1, self.state_dim)
        for t in range(T):
            if t > 0:
                x = self.transition_mean(x, inputs[t], t, theta)
            predictions[t] = self.observation_mean(x, inputs[t], t, theta)[0]
        return predictions

    def __repr__(self) -> str:
        """String representation of model."""
        enabled = [feature for feature, ok in self.get_capabilities().items() if ok]
        return f"{self.__class__.__name__}(name={self.name!r}, capabilities={enabled})"


def select_derivatives(grad: np.ndarray, hess: np.ndarray, all_names: Sequence[str],
                       names: Sequence[str]) -> Derivatives:
    """Restrict full-parameter derivatives to the requested names, in order."""
    index = [list(all_names).index(name) for name in names]
    return grad[:, index], hess[:, index][:, :, index]


def regression_update(moments: np.ndarray, count: float, coefs: np.ndarray, free_mask: np.ndarray,
                      variance: float, update_variance: bool) -> Tuple[np.ndarray, float]:
    """
    Maximize a Gaussian linear-regression log-likelihood from second moments.

    ``moments`` is the (weighted) sum of z z' with z = [target, regressors];
    the model is target = regressors' coefs + noise of the given variance.
    Free coefficients solve the normal equations with the fixed ones held;
    the variance becomes RSS / count.

    Returns:
        (coefficients, variance)
    """
    coefs = np.asarray(coefs, dtype=float).copy()
    free_mask = np.asarray(free_mask, dtype=bool)
    regress = moments[1:, 1:]
    cross = moments[1:, 0]
    if free_mask.any():
        F = np.flatnonzero(free_mask)
        fixed = np.flatnonzero(~free_mask)
        lhs = regress[np.ix_(F, F)]
        rhs = cross[F] - regress[np.ix_(F, fixed)] @ coefs[fixed]
        if np.linalg.cond(lhs) > 1e12:
            logger.warning("Singular regression statistics; using a pseudo-inverse")
            coefs[F] = np.linalg.pinv(lhs) @ rhs
        else:
            coefs[F] = np.linalg.solve(lhs, rhs)
    if update_variance:
        c = np.concatenate([[1.0], -coefs])
        variance = max(float(c @ moments @ c) / count, 1e-12)
    return coefs, variance
