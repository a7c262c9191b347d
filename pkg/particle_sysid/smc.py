"""
Sequential Monte Carlo core.

Generic SMC with bootstrap, custom or twisted-Gaussian proposals, optional
twisting potentials, the bootstrap particle filter, and conditional SMC with
or without ancestor sampling. Every run stores its full history
(particles, ancestors, weights) in a ParticleEnsemble so that estimators and
learners can read trajectories and per-step quantities off a single pass.

Randomness: step t draws everything (resampling, then propagation of all N
particles in one vectorised call) from ``rng.split(t)``, so a run is a pure
function of (model, data, theta, N, seed).
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .core import Dataset, ParameterVector, RandomStream
from .errors import DegeneracyError, InputError
from .gaussian import TwistTables, gaussian_logpdf, gaussian_message_integral
from .systems.base import StateSpaceModel
from .utils import write_jsonl

logger = logging.getLogger(__name__)

RESAMPLING_SCHEMES = ("systematic", "multinomial", "stratified")


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _check_weights(norm_weights: np.ndarray) -> np.ndarray:
    w = np.asarray(norm_weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise InputError("Weights must be a nonempty vector", shape=w.shape)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InputError("Weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0:
        raise DegeneracyError("All resampling weights are zero", n_particles=w.size)
    return w / total


def _inverse_cdf(w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """First index whose cumulative weight exceeds u."""
    cumulative = np.cumsum(w)
    cumulative /= cumulative[-1]
    return np.searchsorted(cumulative, u, side="right").astype(np.int64)


def resample_multinomial(norm_weights: np.ndarray, rng: RandomStream, n: Optional[int] = None) -> np.ndarray:
    """
    I.i.d. categorical ancestor indices.

    Args:
        norm_weights: Nonnegative weights summing to one
        rng: Random stream
        n: Number of draws (defaults to len(weights))

    Raises:
        DegeneracyError: all weights are zero
    """
    w = _check_weights(norm_weights)
    n = w.size if n is None else n
    return _inverse_cdf(w, rng.random(n))


def resample_systematic(norm_weights: np.ndarray, rng: RandomStream) -> np.ndarray:
    """Single-uniform systematic resampling; offspring counts lie in {floor(Nw), ceil(Nw)}."""
    w = _check_weights(norm_weights)
    N = w.size
    return _inverse_cdf(w, (rng.random() + np.arange(N)) / N)


def resample_stratified(norm_weights: np.ndarray, rng: RandomStream) -> np.ndarray:
    w = _check_weights(norm_weights)
    N = w.size
    return _inverse_cdf(w, (rng.random(N) + np.arange(N)) / N)


_RESAMPLERS = {
    "systematic": resample_systematic,
    "multinomial": resample_multinomial,
    "stratified": resample_stratified,
}


def effective_sample_size(norm_weights: np.ndarray) -> float:
    w = np.asarray(norm_weights, dtype=float)
    return float(1.0 / np.sum(w ** 2))


def _normalize(log_weights: np.ndarray, step: int) -> Tuple[np.ndarray, float]:
    """Normalized weights and logsumexp of the log-weights, raising on degeneracy."""
    log_weights = np.where(np.isnan(log_weights), -np.inf, log_weights)
    total = float(logsumexp(log_weights))
    if not math.isfinite(total):
        raise DegeneracyError("All particle weights are zero", step=step, n_particles=log_weights.size)
    w = np.exp(log_weights - total)
    return w / w.sum(), total


# ---------------------------------------------------------------------------
# Ensembles, proposals, twisting
# ---------------------------------------------------------------------------

@dataclass
class ParticleEnsemble:
    """
    Full history of a particle system.

    Attributes:
        particles: (T, N, d) states
        ancestors: (T, N) parent index at t-1 of particle i at t; row 0 is the identity
        log_weights: (T, N) unnormalized log-weights
        norm_weights: (T, N) normalized weights
        ess: (T,) effective sample size
        resampled: (T,) whether resampling preceded step t
        logz_steps: (T,) running ln Z estimate
    """
    particles: np.ndarray
    ancestors: np.ndarray
    log_weights: np.ndarray
    norm_weights: np.ndarray
    ess: np.ndarray
    resampled: np.ndarray
    logz_steps: np.ndarray

    @property
    def T(self) -> int:
        return self.particles.shape[0]

    @property
    def N(self) -> int:
        return self.particles.shape[1]

    @property
    def t(self) -> int:
        return self.T - 1

    @property
    def logZ(self) -> float:
        return float(self.logz_steps[-1])

    def lineage_indices(self) -> np.ndarray:
        """(T, N): index at step t of the ancestor of final particle i."""
        index = np.empty((self.T, self.N), dtype=np.int64)
        index[-1] = np.arange(self.N)
        for t in range(self.T - 1, 0, -1):
            index[t - 1] = self.ancestors[t, index[t]]
        return index

    def trace_path(self, i: int) -> np.ndarray:
        """Ancestral trajectory (T, d) of final particle i."""
        idx = int(i)
        path = np.empty((self.T,) + self.particles.shape[2:], dtype=self.particles.dtype)
        for t in range(self.T - 1, -1, -1):
            path[t] = self.particles[t, idx]
            if t > 0:
                idx = int(self.ancestors[t, idx])
        return path

    def paths(self) -> np.ndarray:
        """All N ancestral trajectories, shape (N, T, d)."""
        index = self.lineage_indices()
        return np.swapaxes(self.particles[np.arange(self.T)[:, None], index], 0, 1)

    def sample_path(self, rng: RandomStream) -> np.ndarray:
        k = int(resample_multinomial(self.norm_weights[-1], rng, 1)[0])
        return self.trace_path(k)

    def filter_means(self) -> np.ndarray:
        return np.einsum("tn,tnd->td", self.norm_weights, self.particles.astype(float))

    def diagnostics(self):
        increments = np.diff(np.concatenate([[0.0], self.logz_steps]))
        for t in range(self.T):
            yield {
                "step": t,
                "ess": float(self.ess[t]),
                "logz_increment": float(increments[t]),
                "resampled": bool(self.resampled[t]),
            }

    def write_diagnostics(self, path: Path) -> None:
        """Per-step JSONL dump: step, ess, logz_increment, resampled."""
        write_jsonl(path, self.diagnostics())


@dataclass(frozen=True)
class Proposal:
    """
    Proposal kernel q_t.

    Attributes:
        sample: (x_prev, u, t, theta, rng) -> x
        logpdf: (x, x_prev, u, t, theta) -> (N,) or None for bootstrap
        tag: "bootstrap", "custom" or "locally-optimal-approx"
        sample_initial: optional (theta, n, rng) -> x for step 0
        initial_logpdf: optional (x, theta) -> (N,)
    """
    sample: Optional[Callable] = None
    logpdf: Optional[Callable] = None
    tag: str = "bootstrap"
    sample_initial: Optional[Callable] = None
    initial_logpdf: Optional[Callable] = None

    @property
    def is_bootstrap(self) -> bool:
        return self.tag == "bootstrap"


BOOTSTRAP = Proposal()


@dataclass(frozen=True)
class TwistingPotential:
    """log psi_t evaluator with psi_{-1} = psi_{T-1} = 1."""
    tables: TwistTables

    def log_value(self, t: int, x: np.ndarray) -> np.ndarray:
        return self.tables.log_psi(t, np.asarray(x, dtype=float))


def quadratic_twist(tables: TwistTables) -> TwistingPotential:
    return TwistingPotential(tables)


def _sqrt_factor(cov: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        w, V = np.linalg.eigh(cov)
        return V * np.sqrt(np.clip(w, 0.0, None))


def twisted_gaussian_proposal(model: StateSpaceModel, tables: TwistTables, data: Dataset,
                              theta: ParameterVector) -> Proposal:
    """
    Gaussian proposal matched to the twisting messages.

    With transition N(mu(x_prev), Q) and message exp(-1/2 x'Ax + b'x), the
    proposal is N(G'mu + QGb, QG) with G = (I + AQ)^-1. The initial step uses
    the model's initial moments when the model has an initial density with
    nonsingular covariance; otherwise it falls back to the model's own
    initial sampler.
    """
    model.require("linearization", "twisted-smc")
    model.require("transition_density", "twisted-smc")
    Q = np.atleast_2d(model.transition_covariance(theta))
    T = tables.T
    covs, shifts, Gs = [], [], []
    for t in range(T):
        _, _, _, G = gaussian_message_integral(tables.message_a[t], tables.message_b[t], tables.message_c[t], Q)
        cov = 0.5 * (Q @ G + (Q @ G).T)
        covs.append(cov)
        shifts.append(Q @ G @ tables.message_b[t])
        Gs.append(G)
    factors = [_sqrt_factor(cov) for cov in covs]

    def sample(x_prev, u, t, theta_, rng):
        mu = model.transition_mean(x_prev.astype(float), u, t, theta_)
        mean = mu @ Gs[t] + shifts[t]
        return mean + rng.standard_normal(mean.shape) @ factors[t].T

    def logpdf(x, x_prev, u, t, theta_):
        mu = model.transition_mean(x_prev.astype(float), u, t, theta_)
        mean = mu @ Gs[t] + shifts[t]
        return gaussian_logpdf(x - mean, np.zeros(x.shape[1]), covs[t])

    sample_initial = initial_logpdf = None
    if model.supports_feature("initial_density"):
        m1, P1 = model.initial_moments(theta, data)
        m1 = np.asarray(m1, dtype=float)
        P1 = np.atleast_2d(P1)
        if np.linalg.matrix_rank(P1) == P1.shape[0]:
            _, _, _, G0 = gaussian_message_integral(tables.message_a[0], tables.message_b[0],
                                                    tables.message_c[0], P1)
            cov0 = 0.5 * (P1 @ G0 + (P1 @ G0).T)
            mean0 = G0.T @ m1 + P1 @ G0 @ tables.message_b[0]
            factor0 = _sqrt_factor(cov0)

            def sample_initial(theta_, n, rng):
                return mean0 + rng.standard_normal((n, mean0.size)) @ factor0.T

            def initial_logpdf(x, theta_):
                return gaussian_logpdf(x, mean0, cov0)

    return Proposal(sample, logpdf, "locally-optimal-approx", sample_initial, initial_logpdf)


# ---------------------------------------------------------------------------
# SMC
# ---------------------------------------------------------------------------

def _observation_term(model, data, t, x, theta) -> np.ndarray:
    if not data.is_observed(t):
        return np.zeros(x.shape[0])
    return model.observation_logpdf(data.y(t), x, data.u(t), t, theta)


def smc_run(model: StateSpaceModel, data: Dataset, theta: ParameterVector, N: int, rng: RandomStream,
            proposal: Proposal = BOOTSTRAP, twist: Optional[TwistingPotential] = None,
            resampling: str = "systematic", ess_threshold: Optional[float] = None,
            diagnostics_path: Optional[Path] = None) -> ParticleEnsemble:
    """
    Generic sequential Monte Carlo.

    Weights: bootstrap proposals weight by g(y_t | x_t); other proposals by
    f g / q. A twisting potential multiplies in psi_t(x_t) / psi_{t-1}(x_{t-1}).
    ln Z accumulates logsumexp(log W_{t-1} + log w_t) per step.

    Args:
        model: State-space model
        data: Dataset (unobserved steps contribute no observation factor)
        theta: Parameters
        N: Number of particles (>= 2)
        rng: Random stream
        proposal: Proposal kernel (default bootstrap)
        twist: Optional twisting potential
        resampling: "systematic" (default), "multinomial" or "stratified"
        ess_threshold: Resample only when ESS < threshold * N; None resamples every step
        diagnostics_path: Optional JSONL path for per-step diagnostics

    Returns:
        ParticleEnsemble holding the whole history; ``logZ`` estimates ln p(y_1:T | theta)

    Raises:
        InputError: N < 2 or unknown resampling scheme
        DegeneracyError: all weights are zero at some step (carries the step)
    """
    if N < 2:
        raise InputError("SMC needs at least two particles", n_particles=N)
    if resampling not in _RESAMPLERS:
        raise InputError("Unknown resampling scheme", resampling=resampling, known=RESAMPLING_SCHEMES)
    if not proposal.is_bootstrap:
        model.require("transition_density", "smc with a custom proposal")
    resample = _RESAMPLERS[resampling]
    T, d = data.T, model.state_dim
    particles = np.zeros((T, N, d), dtype=model.state_dtype)
    ancestors = np.zeros((T, N), dtype=np.int64)
    log_weights = np.zeros((T, N))
    norm_weights = np.zeros((T, N))
    ess = np.zeros(T)
    resampled = np.zeros(T, dtype=bool)
    logz_steps = np.zeros(T)

    step_rng = rng.split(0)
    ancestors[0] = np.arange(N)
    if proposal.sample_initial is not None:
        x = proposal.sample_initial(theta, N, step_rng)
        logw = model.initial_logpdf(x, theta, data=data) - proposal.initial_logpdf(x, theta)
    else:
        x = model.sample_initial(theta, N, step_rng, data=data)
        logw = np.zeros(N)
    logw = logw + _observation_term(model, data, 0, x, theta)
    if twist is not None:
        logw = logw + twist.log_value(0, x)
    particles[0] = x
    log_weights[0] = logw
    norm_weights[0], total = _normalize(logw, 0)
    logz = total - math.log(N)
    logz_steps[0] = logz
    ess[0] = effective_sample_size(norm_weights[0])

    for t in range(1, T):
        step_rng = rng.split(t)
        u = data.u(t)
        if ess_threshold is None or ess[t - 1] < ess_threshold * N:
            a = resample(norm_weights[t - 1], step_rng)
            prev_log_w = np.full(N, -math.log(N))
            resampled[t] = True
        else:
            a = np.arange(N)
            prev_log_w = np.log(norm_weights[t - 1])
        x_prev = particles[t - 1][a]
        if proposal.is_bootstrap:
            x = model.sample_transition(x_prev, u, t, theta, step_rng)
            inc = _observation_term(model, data, t, x, theta)
        else:
            x = proposal.sample(x_prev, u, t, theta, step_rng)
            inc = (model.transition_logpdf(x, x_prev, u, t, theta)
                   + _observation_term(model, data, t, x, theta)
                   - proposal.logpdf(x, x_prev, u, t, theta))
        if twist is not None:
            inc = inc + twist.log_value(t, x) - twist.log_value(t - 1, x_prev)
        logw = prev_log_w + inc
        particles[t] = x
        ancestors[t] = a
        log_weights[t] = logw
        norm_weights[t], total = _normalize(logw, t)
        logz += total
        logz_steps[t] = logz
        ess[t] = effective_sample_size(norm_weights[t])
        logger.debug("step %d: ess=%.1f logZ increment=%.4f resampled=%s", t, ess[t], total, resampled[t])

    ensemble = ParticleEnsemble(particles, ancestors, log_weights, norm_weights, ess, resampled, logz_steps)
    if diagnostics_path is not None:
        ensemble.write_diagnostics(diagnostics_path)
    return ensemble


def bootstrap_pf(model: StateSpaceModel, data: Dataset, theta: ParameterVector, N: int,
                 rng: RandomStream, **kwargs) -> Tuple[np.ndarray, float]:
    """
    Bootstrap particle filter.

    Returns:
        (filter means (T, d), ln Z estimate)
    """
    ensemble = smc_run(model, data, theta, N, rng, proposal=BOOTSTRAP, **kwargs)
    return ensemble.filter_means(), ensemble.logZ


def twisted_smc_run(model: StateSpaceModel, data: Dataset, theta: ParameterVector, N: int,
                    rng: RandomStream, matched_proposal: bool = False,
                    tables: Optional[TwistTables] = None, **kwargs) -> ParticleEnsemble:
    """
    SMC twisted by extended-Kalman potentials.

    Args:
        matched_proposal: also replace the bootstrap proposal by the matched
            Gaussian; the default only reweights
        tables: Precomputed tables (computed with ``ekf_twisting`` if omitted)
    """
    from .gaussian import ekf_twisting

    tables = ekf_twisting(model, data, theta) if tables is None else tables
    proposal = twisted_gaussian_proposal(model, tables, data, theta) if matched_proposal else BOOTSTRAP
    return smc_run(model, data, theta, N, rng, proposal=proposal, twist=quadratic_twist(tables), **kwargs)


# ---------------------------------------------------------------------------
# Conditional SMC
# ---------------------------------------------------------------------------

def csmc_run(model: StateSpaceModel, data: Dataset, theta: ParameterVector, reference: np.ndarray,
             N: int, rng: RandomStream, ancestor_sampling: bool = False,
             return_ensemble: bool = False):
    """
    Conditional SMC (optionally with ancestor sampling).

    The reference trajectory occupies the last slot at every step and
    multinomial resampling is used throughout. With ancestor sampling the
    reference's ancestor at step t is drawn with probabilities proportional
    to W_{t-1}^i p(x'_t | x_{t-1}^i).

    Args:
        reference: (T, d) reference trajectory
        ancestor_sampling: enable ancestor sampling (needs a transition density)
        return_ensemble: also return the ParticleEnsemble

    Returns:
        new reference (T, d), or (new reference, ensemble)

    Raises:
        InputError: N < 2 or reference shape mismatch
        CapabilityError: ancestor sampling on a sample-only transition
        DegeneracyError: all weights zero at some step
    """
    if N < 2:
        raise InputError("Conditional SMC needs at least two particles", n_particles=N)
    reference = np.asarray(reference)
    T, d = data.T, model.state_dim
    if reference.shape != (T, d):
        raise InputError("Reference trajectory does not match the dataset", expected=(T, d), got=reference.shape)
    if ancestor_sampling:
        model.require("transition_density", "pgas")
    particles = np.zeros((T, N, d), dtype=model.state_dtype)
    ancestors = np.zeros((T, N), dtype=np.int64)
    log_weights = np.zeros((T, N))
    norm_weights = np.zeros((T, N))
    ess = np.zeros(T)
    resampled = np.zeros(T, dtype=bool)
    logz_steps = np.zeros(T)
    last = N - 1

    step_rng = rng.split(0)
    x = np.empty((N, d), dtype=model.state_dtype)
    x[:last] = model.sample_initial(theta, last, step_rng, data=data)
    x[last] = reference[0]
    ancestors[0] = np.arange(N)
    particles[0] = x
    log_weights[0] = _observation_term(model, data, 0, x, theta)
    norm_weights[0], total = _normalize(log_weights[0], 0)
    logz = total - math.log(N)
    logz_steps[0] = logz
    ess[0] = effective_sample_size(norm_weights[0])

    for t in range(1, T):
        step_rng = rng.split(t)
        u = data.u(t)
        a = np.empty(N, dtype=np.int64)
        a[:last] = resample_multinomial(norm_weights[t - 1], step_rng, last)
        x = np.empty((N, d), dtype=model.state_dtype)
        x[:last] = model.sample_transition(particles[t - 1][a[:last]], u, t, theta, step_rng)
        x[last] = reference[t]
        if ancestor_sampling:
            logits = np.log(norm_weights[t - 1]) + model.transition_logpdf(
                reference[t][None, :], particles[t - 1], u, t, theta)
            a_w, _ = _normalize(logits, t)
            a[last] = resample_multinomial(a_w, step_rng, 1)[0]
        else:
            a[last] = last
        particles[t] = x
        ancestors[t] = a
        resampled[t] = True
        log_weights[t] = _observation_term(model, data, t, x, theta)
        norm_weights[t], total = _normalize(log_weights[t], t)
        logz += total - math.log(N)
        logz_steps[t] = logz
        ess[t] = effective_sample_size(norm_weights[t])

    ensemble = ParticleEnsemble(particles, ancestors, log_weights, norm_weights, ess, resampled, logz_steps)
    new_reference = ensemble.sample_path(rng.split(T))
    if return_ensemble:
        return new_reference, ensemble
    return new_reference


def initial_reference(model: StateSpaceModel, data: Dataset, theta: ParameterVector, N: int,
                      rng: RandomStream) -> np.ndarray:
    """Reference trajectory drawn from an unconditional run with multinomial resampling."""
    ensemble = smc_run(model, data, theta, N, rng, resampling="multinomial")
    return ensemble.sample_path(rng.split(data.T))
