"""
Finite-state hidden Markov model with exact oracles.

Small enough to enumerate every trajectory, which makes it the reference
for particle methods: the forward algorithm gives the exact likelihood and
enumeration gives the exact smoothing law over whole trajectories.
"""

import itertools
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from ..core import Dataset, ParameterVector, RandomStream
from ..errors import InputError
from .base import StateSpaceModel

MAX_STATES = 5
MAX_STEPS = 8


class FiniteHmm(StateSpaceModel):
    """
    x_1 ~ initial, x_t | x_{t-1} ~ transition[x_{t-1}], y_t | x_t ~ emission[x_t].

    States and observations are integer labels (observations stored as floats).
    """

    name = "hmm"
    state_dtype = np.int64
    features = frozenset({"initial_density", "transition_density", "exact_likelihood"})

    def __init__(self, initial: np.ndarray, transition: np.ndarray, emission: np.ndarray, **options):
        super().__init__(**options)
        self.initial = np.asarray(initial, dtype=float)
        self.transition = np.asarray(transition, dtype=float)
        self.emission = np.asarray(emission, dtype=float)
        K = self.initial.size
        if self.transition.shape != (K, K) or self.emission.shape[0] != K:
            raise InputError("HMM tables have inconsistent shapes", initial=K, transition=self.transition.shape,
                             emission=self.emission.shape)
        for label, table in (("initial", self.initial[None]), ("transition", self.transition),
                             ("emission", self.emission)):
            if np.any(table < 0) or not np.allclose(table.sum(axis=1), 1.0):
                raise InputError("HMM table rows must be probability vectors", table=label)
        self.num_states = K
        self.num_symbols = self.emission.shape[1]

    def default_parameters(self) -> Dict[str, float]:
        return {}

    # -- model interface ----------------------------------------------

    def sample_initial(self, theta, n, rng, data=None):
        return rng.choice(self.num_states, size=(n, 1), p=self.initial).astype(np.int64)

    def initial_logpdf(self, x, theta, data=None):
        with np.errstate(divide="ignore"):
            return np.log(self.initial[np.asarray(x)[:, 0]])

    def sample_transition(self, x_prev, u, t, theta, rng):
        rows = self.transition[np.asarray(x_prev)[:, 0]]
        cumulative = np.cumsum(rows, axis=1)
        draws = rng.random((rows.shape[0], 1))
        return np.minimum((draws > cumulative).sum(axis=1), self.num_states - 1).reshape(-1, 1).astype(np.int64)

    def transition_logpdf(self, x, x_prev, u, t, theta):
        x, x_prev = np.broadcast_arrays(np.asarray(x)[:, 0], np.asarray(x_prev)[:, 0])
        with np.errstate(divide="ignore"):
            return np.log(self.transition[x_prev, x])

    def observation_logpdf(self, y, x, u, t, theta):
        symbol = int(np.asarray(y)[0])
        with np.errstate(divide="ignore"):
            return np.log(self.emission[np.asarray(x)[:, 0], symbol])

    def sample_observation(self, x, u, t, theta, rng):
        rows = self.emission[np.asarray(x)[:, 0]]
        cumulative = np.cumsum(rows, axis=1)
        draws = rng.random((rows.shape[0], 1))
        return np.minimum((draws > cumulative).sum(axis=1), self.num_symbols - 1).reshape(-1, 1).astype(float)

    # -- exact oracles ------------------------------------------------

    def _log_emissions(self, data: Dataset) -> np.ndarray:
        """(T, K) log-emission table; unobserved steps contribute 0."""
        out = np.zeros((data.T, self.num_states))
        with np.errstate(divide="ignore"):
            log_b = np.log(self.emission)
        for t in range(data.T):
            if data.is_observed(t):
                out[t] = log_b[:, int(data.y(t)[0])]
        return out

    def exact_loglik(self, data: Dataset, theta: Optional[ParameterVector] = None) -> float:
        """Forward algorithm in log space."""
        with np.errstate(divide="ignore"):
            log_a = np.log(self.transition)
            alpha = np.log(self.initial)
        log_e = self._log_emissions(data)
        alpha = alpha + log_e[0]
        for t in range(1, data.T):
            alpha = logsumexp(alpha[:, None] + log_a, axis=0) + log_e[t]
        return float(logsumexp(alpha))

    def enumerate_trajectories(self, data: Dataset) -> Tuple[np.ndarray, np.ndarray]:
        """
        Every trajectory with its joint log-density.

        Returns:
            (trajectories (K**T, T), log p(x_1:T, y_1:T) (K**T,))

        Raises:
            InputError: more than MAX_STATES states or MAX_STEPS steps
        """
        if self.num_states > MAX_STATES or data.T > MAX_STEPS:
            raise InputError("Enumeration is limited to small models", states=self.num_states, steps=data.T,
                             max_states=MAX_STATES, max_steps=MAX_STEPS)
        trajectories = np.array(list(itertools.product(range(self.num_states), repeat=data.T)), dtype=np.int64)
        with np.errstate(divide="ignore"):
            log_a = np.log(self.transition)
            log_pi = np.log(self.initial)
        log_e = self._log_emissions(data)
        steps = np.arange(data.T)
        log_joint = log_pi[trajectories[:, 0]] + log_e[steps, trajectories].sum(axis=1)
        log_joint = log_joint + log_a[trajectories[:, :-1], trajectories[:, 1:]].sum(axis=1)
        return trajectories, log_joint

    def smoothing_distribution(self, data: Dataset) -> Dict[Tuple[int, ...], float]:
        """Exact p(x_1:T | y_1:T) over all trajectories with positive probability."""
        trajectories, log_joint = self.enumerate_trajectories(data)
        probs = np.exp(log_joint - logsumexp(log_joint))
        return {tuple(int(s) for s in traj): float(p) for traj, p in zip(trajectories, probs) if p > 0}


def toy_hmm(num_states: int = 3, num_symbols: int = 3, seed: int = 0, **options) -> FiniteHmm:
    """
    Random HMM whose tables are drawn from a flat Dirichlet.

    Raises:
        InputError: num_states above MAX_STATES
    """
    if not 1 <= num_states <= MAX_STATES:
        raise InputError("Toy HMM supports 1 to 5 states", num_states=num_states)
    rng = RandomStream(seed)
    initial = rng.dirichlet(np.ones(num_states))
    transition = rng.dirichlet(np.ones(num_states), size=num_states)
    emission = rng.dirichlet(np.ones(num_symbols), size=num_states)
    return FiniteHmm(initial, transition, emission, num_states=num_states, num_symbols=num_symbols, seed=seed,
                     **options)
