"""
Maximum-likelihood learners.

- ``gradient_search``: Newton (or gradient) ascent on the particle estimate
  of ln p(y | theta) with a stochastic Armijo line search
- ``pem_lgss``: exact EM for linear-Gaussian models (Kalman/RTS E-step)
- ``psaem``: particle stochastic approximation EM driven by conditional SMC
  with ancestor sampling
"""

import logging
import math
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
from scipy import linalg, optimize

from .core import Dataset, ParameterVector, RandomStream
from .errors import CapabilityError, DegeneracyError, InputError, NumericalError
from .estimators import estimate_loglik, score_and_hessian
from .gaussian import LgssSpec, kalman_filter, rts_smoother
from .models import EmState, SearchState, TraceRecord
from .smc import csmc_run, initial_reference
from .systems.base import StateSpaceModel
from .systems.lgss import SCALAR_PARAMS, LgssModel

logger = logging.getLogger(__name__)

EIGEN_CLIP = -1e-6


# ---------------------------------------------------------------------------
# Gradient / Newton search
# ---------------------------------------------------------------------------

def _safe_loglik(model, data, theta, N, rng, **smc_options) -> float:
    try:
        return estimate_loglik(model, data, theta, N, rng, **smc_options)
    except DegeneracyError:
        return -math.inf


def _ascent_direction(grad: np.ndarray, hess: Optional[np.ndarray], newton: bool):
    """
    Newton direction from the Hessian clipped to be negative definite, or the raw gradient.

    Returns:
        (direction, scaling matrix or None)
    """
    if not newton or hess is None:
        return grad.copy(), None
    w, V = np.linalg.eigh(0.5 * (hess + hess.T))
    clipped = w > EIGEN_CLIP
    if clipped.sum() > 0.5 * w.size:
        return grad.copy(), None
    w = np.where(clipped, EIGEN_CLIP, w)
    scaling = (V * w) @ V.T
    return -(V / w) @ V.T @ grad, scaling


def _logz_spread(model, data, theta, N, rng, runs, **smc_options) -> float:
    estimates = [_safe_loglik(model, data, theta, N, rng.split(i), **smc_options) for i in range(runs)]
    finite = [e for e in estimates if math.isfinite(e)]
    return float(np.std(finite, ddof=1)) if len(finite) > 1 else 0.0


def gradient_search(model: StateSpaceModel, data: Dataset, theta0: ParameterVector, N: int, rng: RandomStream,
                    max_iters: int = 50, newton: bool = True, initial_step: float = 1.0, max_backtracks: int = 10,
                    c1: float = 1e-4, probe_runs: int = 5, kappa_every: int = 10,
                    max_step_norm: Optional[float] = None, **smc_options) -> SearchState:
    """
    Stochastic Newton/gradient ascent on the particle log-likelihood.

    Every iteration estimates the score and Hessian from one bootstrap run,
    moves along d on the unconstrained scale and accepts the step when

        logZ(theta+) >= logZ(theta) + c1 alpha g'd - kappa,

    with both estimates sharing a random stream and kappa twice the spread
    of repeated logZ estimates at a fixed theta (refreshed every
    ``kappa_every`` iterations). A rejected step is halved up to
    ``max_backtracks`` times; after that the iterate stays and the next
    search starts from the shrunk step.

    Args:
        theta0: Starting point; theta0.free are searched
        N: Particles per estimate
        newton: Newton direction (falls back to the gradient when the Hessian is far from negative definite)
        initial_step: Step length tried first
        max_step_norm: Cap on the norm of alpha d (unconstrained scale)

    Returns:
        SearchState whose trace records one row per iteration
    """
    model.require("grad_logs", "gradsearch")
    state = SearchState(theta0, step_length=initial_step)
    names = tuple(theta0.free)
    if not names:
        for k in range(max_iters + 1):
            state.trace.append(TraceRecord(k, theta0.to_dict(), math.nan, 0.0, False))
        state.iteration = max_iters
        state.stopped = "no free parameters"
        return state

    kappa = 2.0 * _logz_spread(model, data, theta0, N, rng.split(0), probe_runs, **smc_options)
    theta = theta0
    start_logz = _safe_loglik(model, data, theta, N, rng.split(0).split(probe_runs), **smc_options)
    state.trace.append(TraceRecord(0, theta.to_dict(), start_logz, math.nan, True))

    for k in range(1, max_iters + 1):
        it_rng = rng.split(k)
        if kappa_every and k % kappa_every == 0:
            kappa = 2.0 * _logz_spread(model, data, theta, N, it_rng.split(2), probe_runs, **smc_options)
        try:
            grad, hess = score_and_hessian(model, data, theta, N, it_rng.split(0), names=names)
        except DegeneracyError as e:
            logger.warning("Score estimate degenerate at iteration %d: %s", k, e)
            state.stopped = "degenerate score estimate"
            break
        if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
            logger.warning("Non-finite gradient at iteration %d; stopping", k)
            state.stopped = "non-finite gradient"
            break
        g_eta, h_eta = theta.chain_rule(grad, hess)
        direction, scaling = _ascent_direction(g_eta, h_eta, newton)
        state.direction, state.scaling = direction, scaling

        base = _safe_loglik(model, data, theta, N, it_rng.split(1), **smc_options)
        eta = theta.to_unconstrained()
        slope = float(g_eta @ direction)
        alpha = state.step_length
        accepted = False
        new_logz = base
        for _ in range(max_backtracks + 1):
            step = alpha * direction
            if max_step_norm is not None and np.linalg.norm(step) > max_step_norm:
                step *= max_step_norm / np.linalg.norm(step)
            candidate = theta.from_unconstrained(eta + step)
            logz = _safe_loglik(model, data, candidate, N, it_rng.split(1), **smc_options)
            if math.isfinite(logz) and logz >= base + c1 * alpha * slope - kappa:
                theta, new_logz, accepted = candidate, logz, True
                break
            alpha *= 0.5

        if accepted:
            state.step_length = min(initial_step, 2.0 * alpha)
        else:
            state.step_length = alpha
            logger.warning("Line search failed at iteration %d; keeping the iterate", k)
        state.theta = theta
        state.iteration = k
        state.trace.append(TraceRecord(k, theta.to_dict(), new_logz, alpha if accepted else 0.0, accepted))
        logger.info("gradsearch %d: logZ=%.4f step=%.3g accepted=%s", k, new_logz, alpha, accepted)
    return state


# ---------------------------------------------------------------------------
# Exact EM for linear-Gaussian models
# ---------------------------------------------------------------------------

def _solve_right(numerator: np.ndarray, gram: np.ndarray, label: str) -> np.ndarray:
    """numerator @ inv(gram), regularized when gram is near singular."""
    if np.linalg.cond(gram) > 1e12:
        logger.warning("Singular %s statistics; using a pseudo-inverse", label)
        return numerator @ np.linalg.pinv(gram)
    return linalg.solve(gram, numerator.T, assume_a="sym").T


def em_lgss_step(spec: LgssSpec, data: Dataset, free: Sequence[str] = ("A", "C", "Q", "R")) -> LgssSpec:
    """
    One exact EM iteration for the matrices in ``free`` (subset of A, C, Q, R).

    B, D, mu1 and P1 are held. A is updated before Q and C before R, each
    maximizing the expected complete-data log-likelihood given the rest,
    so the likelihood cannot decrease.
    """
    beliefs, cross = rts_smoother(spec, data)
    T = data.T
    m = np.array([b.mean for b in beliefs])
    P = np.array([b.cov for b in beliefs])
    second = P + np.einsum("ti,tj->tij", m, m)
    u = np.array([spec._input(data, t) for t in range(T)]) if spec.input_dim else np.zeros((T, 0))
    A, C, Q, R = spec.A, spec.C, spec.Q, spec.R

    if T > 1 and ("A" in free or "Q" in free):
        Bu = u[1:] @ spec.B.T
        lagged = np.array([cross[t] + np.outer(m[t + 1], m[t]) for t in range(T - 1)])
        S_zx = lagged.sum(axis=0) - np.einsum("ti,tj->ij", Bu, m[:-1])
        S_xx = second[:-1].sum(axis=0)
        S_zz = (second[1:].sum(axis=0) - np.einsum("ti,tj->ij", Bu, m[1:]) - np.einsum("ti,tj->ij", m[1:], Bu)
                + np.einsum("ti,tj->ij", Bu, Bu))
        if "A" in free:
            A = _solve_right(S_zx, S_xx, "transition")
        if "Q" in free:
            Q = (S_zz - A @ S_zx.T - S_zx @ A.T + A @ S_xx @ A.T) / (T - 1)
            Q = 0.5 * (Q + Q.T)

    observed = data.observed_mask
    if observed.any() and ("C" in free or "R" in free):
        r = data.observations[observed] - u[observed] @ spec.D.T
        mo = m[observed]
        S_rx = np.einsum("ti,tj->ij", r, mo)
        S_xx = second[observed].sum(axis=0)
        S_rr = np.einsum("ti,tj->ij", r, r)
        if "C" in free:
            C = _solve_right(S_rx, S_xx, "observation")
        if "R" in free:
            R = (S_rr - C @ S_rx.T - S_rx @ C.T + C @ S_xx @ C.T) / observed.sum()
            R = 0.5 * (R + R.T)

    return LgssSpec(A, spec.B, C, spec.D, Q, R, spec.mu1, spec.P1)


def pem_lgss(model: LgssModel, data: Dataset, theta0: Optional[ParameterVector] = None, iters: int = 50,
             free: Optional[Sequence[str]] = None) -> EmState:
    """
    Exact EM on a linear-Gaussian model.

    Scalar models are parameterized by theta (A, C, Q, R among theta.free are
    learned; B and D stay known). Multivariate models learn the matrices
    named in ``free`` (default A, C, Q, R) and carry them in ``EmState.statistics``.

    Returns:
        EmState whose trace holds the Kalman log-likelihood of every iterate

    Raises:
        CapabilityError: model is not linear-Gaussian
    """
    if not isinstance(model, LgssModel):
        raise CapabilityError("pem runs on linear-Gaussian models only", model=model.name, algorithm="pem")
    if model.scalar:
        theta = theta0 if theta0 is not None else model.parameters(free=("A", "C", "Q", "R"))
        matrices = tuple(name for name in theta.free if name in ("A", "C", "Q", "R"))
        spec = model.spec_for(theta)
    else:
        theta = theta0 if theta0 is not None else model.parameters()
        matrices = tuple(free or ("A", "C", "Q", "R"))
        spec = model.spec
    state = EmState(theta)
    _, loglik = kalman_filter(spec, data)
    state.trace.append(TraceRecord(0, _spec_values(spec, theta, model.scalar), loglik, math.nan, True))

    for k in range(1, iters + 1):
        spec = em_lgss_step(spec, data, matrices)
        _, new_loglik = kalman_filter(spec, data)
        if new_loglik < loglik - 1e-9:
            logger.warning("EM log-likelihood decreased at iteration %d: %.10f -> %.10f", k, loglik, new_loglik)
        loglik = new_loglik
        if model.scalar:
            theta = theta.clipped(**{name: float(getattr(spec, name)[0, 0]) for name in matrices})
            spec = model.spec_for(theta)
        state.theta = theta
        state.iteration = k
        state.trace.append(TraceRecord(k, _spec_values(spec, theta, model.scalar), loglik, math.nan, True))
        logger.info("pem %d: loglik=%.6f", k, loglik)
    if not model.scalar:
        state.statistics = {name: getattr(spec, name) for name in ("A", "B", "C", "D", "Q", "R")}
    return state


def _spec_values(spec: LgssSpec, theta: ParameterVector, scalar: bool) -> Dict[str, float]:
    if scalar:
        return {name: theta[name] for name in SCALAR_PARAMS}
    values = {}
    for name in ("A", "C", "Q", "R"):
        matrix = getattr(spec, name)
        for (i, j), value in np.ndenumerate(matrix):
            values[f"{name}[{i},{j}]"] = float(value)
    return values


# ---------------------------------------------------------------------------
# PSAEM
# ---------------------------------------------------------------------------

def default_step_sizes(k: int, exponent: float = 0.7) -> float:
    """gamma_k = k^-exponent: positive, decreasing, sum diverges, sum of squares converges."""
    return float(k) ** (-exponent)


def weighted_log_joint(model: StateSpaceModel, paths: np.ndarray, weights: np.ndarray, data: Dataset,
                       theta: ParameterVector) -> float:
    """sum_j w_j ln p(x^j_1:T, y_1:T | theta) over a batch of trajectories."""
    total = np.asarray(model.initial_logpdf(paths[:, 0], theta, data=data), dtype=float)
    for t in range(data.T):
        if t > 0:
            total = total + model.transition_logpdf(paths[:, t], paths[:, t - 1], data.u(t), t, theta)
        if data.is_observed(t):
            total = total + model.observation_logpdf(data.y(t), paths[:, t], data.u(t), t, theta)
    finite = weights > 0
    if np.any(~np.isfinite(total[finite])):
        return -math.inf
    return float(weights[finite] @ total[finite])


def _numeric_m_step(model, paths, weights, data, theta, maxiter) -> ParameterVector:
    def objective(eta):
        value = weighted_log_joint(model, paths, weights, data, theta.from_unconstrained(eta))
        return -value if math.isfinite(value) else 1e300

    eta0 = theta.to_unconstrained()
    result = optimize.minimize(objective, eta0, method="Nelder-Mead",
                               options={"maxiter": maxiter, "xatol": 1e-8, "fatol": 1e-10})
    if not np.all(np.isfinite(result.x)) or result.fun >= objective(eta0):
        raise NumericalError("Numeric M-step made no progress", message=str(result.message))
    return theta.from_unconstrained(result.x)


def psaem(model: StateSpaceModel, data: Dataset, theta0: ParameterVector, N: int, iters: int,
          rng: RandomStream, step_sizes: Optional[Union[Sequence[float], Callable[[int], float]]] = None,
          prune_below: float = 1e-6, max_retained: Optional[int] = None, loglik_particles: int = 0,
          m_step_maxiter: int = 200, **smc_options) -> EmState:
    """
    Particle stochastic approximation EM.

    Each iteration runs one conditional-SMC sweep with ancestor sampling,
    keeping the previous reference trajectory, and blends the new weighted
    trajectories into a running surrogate of the expected complete-data
    log-likelihood:

        Q_k = (1 - gamma_k) Q_{k-1} + gamma_k sum_i w^i ln p(x^i, y | theta)

    Models with sufficient statistics blend the statistics and maximize in
    closed form. Otherwise the surrogate is kept as a weighted set of
    trajectories (weights below ``prune_below`` are dropped) and maximized
    numerically on the unconstrained scale. A failed M-step keeps theta.

    Args:
        N: Particles of the conditional SMC
        iters: Number of iterations
        step_sizes: gamma_k as a sequence (k = 1..iters) or callable; default k^-0.7
        loglik_particles: When > 0, record a bootstrap logZ with this many particles per iteration
        m_step_maxiter: Iteration cap of the numeric maximizer

    Raises:
        CapabilityError: model without a transition density
    """
    model.require("transition_density", "psaem")
    if step_sizes is None:
        step_sizes = default_step_sizes
    closed_form = model.supports_feature("sufficient_statistics")
    max_retained = max_retained or 20 * N
    theta = theta0
    state = EmState(theta)
    state.reference = initial_reference(model, data, theta, N, rng.split(0))
    state.trace.append(TraceRecord(0, theta.to_dict(), _record_loglik(model, data, theta, loglik_particles,
                                                                      rng.split(0).split(1), smc_options)))
    for k in range(1, iters + 1):
        it_rng = rng.split(k)
        gamma = float(step_sizes(k) if callable(step_sizes) else step_sizes[k - 1])
        if not 0.0 < gamma <= 1.0:
            raise InputError("Step sizes must lie in (0, 1]", iteration=k, gamma=gamma)
        state.reference, ensemble = csmc_run(model, data, theta, state.reference, N, it_rng.split(0),
                                             ancestor_sampling=True, return_ensemble=True)
        paths = ensemble.paths()
        weights = ensemble.norm_weights[-1]
        accepted = True
        try:
            if closed_form:
                fresh = model.complete_data_statistics(paths, weights, data, theta)
                if state.statistics is None or gamma == 1.0:
                    state.statistics = fresh
                else:
                    state.statistics = {key: (1.0 - gamma) * state.statistics[key] + gamma * fresh[key]
                                        for key in fresh}
                if theta.free:
                    theta = model.maximize_statistics(state.statistics, theta)
            else:
                _blend_paths(state, paths, weights, gamma, prune_below, max_retained)
                if theta.free:
                    theta = _numeric_m_step(model, state.paths, state.weights, data, theta, m_step_maxiter)
        except (NumericalError, linalg.LinAlgError, ValueError, FloatingPointError) as e:
            logger.warning("M-step failed at iteration %d (%s); keeping theta", k, e)
            accepted = False
        state.theta = theta
        state.iteration = k
        logz = _record_loglik(model, data, theta, loglik_particles, it_rng.split(1), smc_options)
        state.trace.append(TraceRecord(k, theta.to_dict(), logz, gamma, accepted))
        logger.info("psaem %d: gamma=%.4f theta=%s", k, gamma, {n: round(theta[n], 6) for n in theta.free})
    return state


def _blend_paths(state: EmState, paths: np.ndarray, weights: np.ndarray, gamma: float, prune_below: float,
                 max_retained: int) -> None:
    if state.paths is None or gamma == 1.0:
        all_paths, all_weights = paths, weights.copy()
    else:
        all_paths = np.concatenate([state.paths, paths], axis=0)
        all_weights = np.concatenate([(1.0 - gamma) * state.weights, gamma * weights])
    keep = all_weights >= prune_below
    if keep.sum() > max_retained:
        keep = np.zeros_like(keep)
        keep[np.argsort(all_weights)[-max_retained:]] = True
    state.paths = all_paths[keep]
    state.weights = all_weights[keep] / all_weights[keep].sum()


def _record_loglik(model, data, theta, particles, rng, smc_options) -> float:
    if model.supports_feature("exact_likelihood"):
        try:
            return model.exact_loglik(data, theta)
        except NumericalError:
            return math.nan
    if particles > 0:
        return _safe_loglik(model, data, theta, particles, rng, **smc_options)
    return math.nan
