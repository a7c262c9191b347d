"""
Particle estimators and evaluation metrics.

- ``estimate_loglik``: ln Z from a bootstrap or twisted particle filter
- ``score_and_hessian``: score and observed information of ln p(y | theta)
  accumulated along the particle genealogy of a single bootstrap run
- ``simulate_output`` / ``e_rms``: noise-free rollouts and their error
- ``acf`` / ``integrated_autocorrelation_time``: chain diagnostics
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .core import Dataset, ParameterVector, RandomStream
from .errors import DomainError, InputError
from .smc import ParticleEnsemble, smc_run, twisted_smc_run
from .systems.base import StateSpaceModel

logger = logging.getLogger(__name__)


def estimate_loglik(model: StateSpaceModel, data: Dataset, theta: ParameterVector, N: int,
                    rng: RandomStream, twisted: bool = False, matched_proposal: bool = False,
                    **smc_options) -> float:
    """
    Estimate ln p(y_1:T | theta); exp of the estimate is unbiased.

    Args:
        model: State-space model
        data: Dataset
        theta: Parameters
        N: Number of particles
        rng: Random stream
        twisted: Use extended-Kalman twisting potentials
        matched_proposal: With twisting, also use the matched Gaussian proposal

    Raises:
        DegeneracyError: propagated from the particle filter
    """
    if twisted:
        return twisted_smc_run(model, data, theta, N, rng, matched_proposal=matched_proposal, **smc_options).logZ
    return smc_run(model, data, theta, N, rng, **smc_options).logZ


@dataclass
class GradHessAccumulators:
    """
    Per-particle centered score/Hessian accumulators and their per-step aggregates.

    Attributes:
        alpha: (N, p) centered score accumulators
        beta: (N, p, p) centered Hessian accumulators
        v: list of (p,) per-step score increments
        B: list of (p, p) per-step Hessian increments
    """
    alpha: np.ndarray
    beta: np.ndarray
    v: list = field(default_factory=list)
    B: list = field(default_factory=list)

    @classmethod
    def zeros(cls, N: int, p: int) -> "GradHessAccumulators":
        return cls(np.zeros((N, p)), np.zeros((N, p, p)))

    def step(self, gamma: np.ndarray, phi: np.ndarray, weights: np.ndarray) -> None:
        v = weights @ gamma
        second = np.einsum("n,nij->ij", weights, phi) + np.einsum("n,ni,nj->ij", weights, gamma, gamma)
        B = second - np.outer(v, v)
        B = 0.5 * (B + B.T)
        self.alpha = gamma - v
        self.beta = phi - B
        self.v.append(v)
        self.B.append(B)

    @property
    def gradient(self) -> np.ndarray:
        return np.sum(self.v, axis=0)

    @property
    def hessian(self) -> np.ndarray:
        H = np.sum(self.B, axis=0)
        return 0.5 * (H + H.T)


def score_from_ensemble(model: StateSpaceModel, data: Dataset, theta: ParameterVector,
                        ensemble: ParticleEnsemble, names: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    """Score and Hessian (theta scale) over ``names`` from a stored bootstrap run."""
    p = len(names)
    acc = GradHessAccumulators.zeros(ensemble.N, p)
    for t in range(data.T):
        x = ensemble.particles[t]
        u = data.u(t)
        if t == 0:
            g_tr, h_tr = model.initial_derivatives(x, theta, names, data=data)
            alpha_prev, beta_prev = acc.alpha, acc.beta
        else:
            a = ensemble.ancestors[t]
            g_tr, h_tr = model.transition_derivatives(x, ensemble.particles[t - 1][a], u, t, theta, names)
            alpha_prev, beta_prev = acc.alpha[a], acc.beta[a]
        gamma = g_tr + alpha_prev
        phi = h_tr + beta_prev
        if data.is_observed(t):
            g_obs, h_obs = model.observation_derivatives(data.y(t), x, u, t, theta, names)
            gamma = gamma + g_obs
            phi = phi + h_obs
        acc.step(gamma, 0.5 * (phi + np.swapaxes(phi, 1, 2)), ensemble.norm_weights[t])
    return acc.gradient, acc.hessian


def score_and_hessian(model: StateSpaceModel, data: Dataset, theta: ParameterVector, N: int,
                      rng: RandomStream, names: Optional[Sequence[str]] = None,
                      return_loglik: bool = False):
    """
    Particle estimate of the score and Hessian of ln p(y_1:T | theta).

    One bootstrap run supplies both the likelihood estimate and the
    genealogy along which the accumulators are propagated.

    Args:
        names: Parameters to differentiate (defaults to theta.free)
        return_loglik: Also return the ln Z estimate of the same run

    Returns:
        (gradient, Hessian) on the theta scale, or (gradient, Hessian, logZ)

    Raises:
        CapabilityError: model supplies no parameter derivatives
    """
    model.require("grad_logs", "score_and_hessian")
    names = tuple(theta.free if names is None else names)
    ensemble = smc_run(model, data, theta, N, rng)
    grad, hess = score_from_ensemble(model, data, theta, ensemble, names)
    if return_loglik:
        return grad, hess, ensemble.logZ
    return grad, hess


def finite_difference_gradient(fn: Callable[[ParameterVector], float], theta: ParameterVector,
                               names: Optional[Sequence[str]] = None) -> np.ndarray:
    """
    Central differences of fn on the unconstrained scale, mapped back to theta.

    The step for component i is 1e-4 (1 + |eta_i|).
    """
    names = tuple(theta.free if names is None else names)
    base = theta.with_free(names)
    eta = base.to_unconstrained()
    grad_eta = np.zeros(len(names))
    for i in range(len(names)):
        h = 1e-4 * (1.0 + abs(eta[i]))
        up, down = eta.copy(), eta.copy()
        up[i] += h
        down[i] -= h
        grad_eta[i] = (fn(base.from_unconstrained(up)) - fn(base.from_unconstrained(down))) / (2.0 * h)
    first = np.array([base.transform(name).derivatives(float(e))[0] for name, e in zip(names, eta)])
    return grad_eta / first


def simulate_output(model: StateSpaceModel, inputs: np.ndarray, theta: ParameterVector,
                    x1: np.ndarray) -> np.ndarray:
    """Noise-free rollout of the model's mean maps from x1; returns (T, obs_dim)."""
    return model.simulate_mean(np.asarray(x1, dtype=float), inputs, theta)


def e_rms(y: np.ndarray, y_hat: np.ndarray) -> float:
    """
    Root-mean-square simulation error sqrt(1/T sum ||y_t - yhat_t||^2).

    Raises:
        InputError: length mismatch or missing entries
    """
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if y_hat.ndim == 1:
        y_hat = y_hat.reshape(-1, 1)
    if y.shape != y_hat.shape:
        raise InputError("Observed and predicted outputs differ in shape", y=y.shape, y_hat=y_hat.shape)
    if y.shape[0] == 0 or not (np.all(np.isfinite(y)) and np.all(np.isfinite(y_hat))):
        raise InputError("e_rms needs nonempty sequences without missing entries")
    return float(np.sqrt(np.mean(np.sum((y - y_hat) ** 2, axis=1))))


@dataclass
class AcfSeries:
    lags: np.ndarray
    values: np.ndarray
    iact: float

    def to_dict(self):
        return {"lags": self.lags.tolist(), "values": self.values.tolist(), "iact": self.iact}


def acf(series: Sequence[float], max_lag: int) -> AcfSeries:
    """
    Sample autocorrelation with biased normalization.

    The integrated autocorrelation time is 1 + 2 sum rho_k, truncated at
    the first negative rho_k.

    Raises:
        InputError: series not longer than max_lag
        DomainError: constant series
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    if max_lag < 0 or n <= max_lag:
        raise InputError("Series must be longer than max_lag", length=n, max_lag=max_lag)
    centered = x - x.mean()
    variance = float(centered @ centered) / n
    if variance <= 0.0:
        raise DomainError("Autocorrelation of a constant series is undefined", length=n)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    spectrum = np.fft.rfft(centered, size)
    autocov = np.fft.irfft(spectrum * np.conj(spectrum), size)[: max_lag + 1] / n
    values = np.clip(autocov / variance, -1.0, 1.0)
    values[0] = 1.0
    return AcfSeries(np.arange(max_lag + 1), values, _iact_from_acf(values))


def _iact_from_acf(values: np.ndarray) -> float:
    total = 1.0
    for rho in values[1:]:
        if rho < 0:
            break
        total += 2.0 * rho
    return float(total)


def integrated_autocorrelation_time(series: Sequence[float], max_lag: Optional[int] = None) -> float:
    x = np.asarray(series, dtype=float)
    if max_lag is None:
        max_lag = min(x.size - 1, max(1, x.size // 2), 1000)
    return acf(x, max_lag).iact


def chain_effective_sample_size(series: Sequence[float], max_lag: Optional[int] = None) -> float:
    x = np.asarray(series, dtype=float)
    return float(x.size / integrated_autocorrelation_time(x, max_lag))
