"""
Bayesian learners.

- ``metropolis_hastings``: random-walk MH on the unconstrained parameter
  scale for any log-likelihood callable; with the Kalman likelihood this is
  the exact reference chain, with a particle estimate it is PMMH
- ``pmmh``: particle marginal Metropolis-Hastings
- ``gibbs_sweep`` / ``particle_gibbs``: systematic-scan Gibbs and particle
  Gibbs (with or without ancestor sampling)
- conjugate parameter updates used by the models' Gibbs conditionals
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .core import Dataset, ParameterVector, Prior, RandomStream, prior_logpdf
from .errors import DegeneracyError, InputError
from .estimators import estimate_loglik
from .models import ChainTrace
from .smc import csmc_run, initial_reference
from .systems.base import StateSpaceModel

logger = logging.getLogger(__name__)

OPTIMAL_SCALE = 2.38 ** 2


# ---------------------------------------------------------------------------
# Metropolis-Hastings
# ---------------------------------------------------------------------------

def mh_accept(log_target_new: float, log_target_old: float, log_q_forward: float, log_q_backward: float,
              rng: RandomStream) -> bool:
    """
    Metropolis-Hastings accept/reject.

    Accepts with probability min(1, exp(delta)), delta = (new - old) + (q_backward - q_forward).
    A uniform is drawn on every call so the stream advances identically
    whatever the outcome. A non-finite new target is always rejected.
    """
    u = rng.random()
    if log_target_new is None or not log_target_new > -math.inf or math.isnan(log_target_new):
        return False
    delta = (log_target_new - log_target_old) + (log_q_backward - log_q_forward)
    return bool(math.log(u) < delta) if u > 0 else True


@dataclass
class RandomWalkProposal:
    """
    Gaussian random walk on the unconstrained parameter scale.

    Attributes:
        cov: Symmetric positive-definite proposal covariance
        adapt: Re-estimate the covariance from the chain during burn-in
        adapt_interval: Iterations between adaptations
    """
    cov: np.ndarray
    adapt: bool = False
    adapt_interval: int = 100
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
            raise InputError("Proposal covariance must be square and symmetric", shape=cov.shape)
        try:
            self._chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as e:
            raise InputError("Proposal covariance must be positive definite") from e
        self.cov = cov

    @classmethod
    def isotropic(cls, dim: int, scale: float, adapt: bool = False) -> "RandomWalkProposal":
        """Covariance scale**2 I."""
        return cls(scale ** 2 * np.eye(dim), adapt=adapt)

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def propose(self, eta: np.ndarray, rng: RandomStream) -> np.ndarray:
        return np.asarray(eta, dtype=float) + self._chol @ rng.standard_normal(self.dim)

    def adapted(self, etas: np.ndarray) -> "RandomWalkProposal":
        """Covariance 2.38^2 / d times the empirical covariance of the samples so far."""
        etas = np.asarray(etas, dtype=float)
        empirical = np.atleast_2d(np.cov(etas, rowvar=False))
        cov = OPTIMAL_SCALE / self.dim * empirical + 1e-10 * np.eye(self.dim)
        try:
            return RandomWalkProposal(cov, self.adapt, self.adapt_interval)
        except InputError:
            logger.warning("Adapted proposal covariance is not positive definite; keeping the previous one")
            return self


def _check_prior_covers(prior: Prior, theta: ParameterVector) -> None:
    missing = [name for name in theta.free if name not in prior]
    if missing:
        raise InputError("Prior must cover every free parameter", missing=missing)


def metropolis_hastings(loglik_fn: Callable[[ParameterVector, RandomStream], float], prior: Prior,
                        theta0: ParameterVector, proposal: RandomWalkProposal, M: int, rng: RandomStream,
                        burn_in: Optional[int] = None) -> ChainTrace:
    """
    Random-walk Metropolis-Hastings over theta0.free.

    The chain moves on the unconstrained scale eta, so the target includes
    the log-Jacobian of the inverse transform. The log-likelihood of the
    current state is carried along and only recomputed for proposals.

    Args:
        loglik_fn: (theta, rng) -> log-likelihood or its estimate; DegeneracyError counts as -inf
        prior: Prior over (at least) the free parameters
        theta0: Initial parameters; theta0.free are sampled
        proposal: Random walk on eta
        M: Number of iterations
        rng: Random stream; iteration m uses rng.split(m + 1)
        burn_in: Iterations during which an adaptive proposal may adapt (default M/10)

    Returns:
        ChainTrace of the M post-move states

    Raises:
        InputError: no free parameters, dimension mismatch, or zero posterior density at theta0
    """
    if not theta0.free:
        raise InputError("Metropolis-Hastings needs at least one free parameter")
    if proposal.dim != len(theta0.free):
        raise InputError("Proposal dimension does not match the free parameters",
                         proposal=proposal.dim, free=len(theta0.free))
    _check_prior_covers(prior, theta0)
    burn_in = M // 10 if burn_in is None else burn_in

    def log_target(theta: ParameterVector, eta: np.ndarray, r: RandomStream) -> Tuple[float, float]:
        lp = prior_logpdf(prior, theta)
        if lp == -math.inf:
            return -math.inf, math.nan
        try:
            ll = float(loglik_fn(theta, r))
        except DegeneracyError as e:
            logger.debug("Degenerate likelihood estimate at %s: %s", theta.to_dict(), e)
            return -math.inf, -math.inf
        if math.isnan(ll):
            return -math.inf, ll
        return ll + lp + theta.log_jacobian(eta), ll

    theta = theta0
    eta = theta.to_unconstrained()
    target, logz = log_target(theta, eta, rng.split(0))
    if target == -math.inf:
        raise InputError("Initial parameters have zero posterior density", theta=theta.to_dict())

    trace = ChainTrace(tuple(theta0.free), seed=rng.seed)
    etas = []
    for m in range(M):
        step_rng = rng.split(m + 1)
        eta_new = proposal.propose(eta, step_rng.split(0))
        theta_new = theta.from_unconstrained(eta_new)
        target_new, logz_new = log_target(theta_new, eta_new, step_rng.split(1))
        accepted = mh_accept(target_new, target, 0.0, 0.0, step_rng.split(2))
        if accepted:
            theta, eta, target, logz = theta_new, eta_new, target_new, logz_new
        trace.append(theta, target, accepted, logz)
        etas.append(eta)
        if proposal.adapt and m < burn_in and (m + 1) % proposal.adapt_interval == 0:
            proposal = proposal.adapted(np.array(etas))
            logger.debug("Adapted proposal at iteration %d", m + 1)
        if (m + 1) % max(1, M // 10) == 0:
            logger.info("MH iteration %d/%d: acceptance %.3f", m + 1, M, trace.acceptance_rate)
    return trace


def exact_likelihood_mh(model: StateSpaceModel, data: Dataset, prior: Prior, proposal: RandomWalkProposal,
                        M: int, rng: RandomStream, theta0: Optional[ParameterVector] = None,
                        burn_in: Optional[int] = None) -> ChainTrace:
    """MH with the model's exact likelihood (Kalman filter, forward algorithm)."""
    model.require("exact_likelihood", "mh")
    theta0 = _initial_theta(model, prior, theta0)

    def loglik(theta, _rng):
        return model.exact_loglik(data, theta)

    trace = metropolis_hastings(loglik, prior, theta0, proposal, M, rng, burn_in)
    trace.config = {"algorithm": "mh", "M": M}
    return trace


def pmmh(model: StateSpaceModel, data: Dataset, prior: Prior, proposal: RandomWalkProposal, N: int, M: int,
         rng: RandomStream, theta0: Optional[ParameterVector] = None, burn_in: Optional[int] = None,
         **smc_options: Any) -> ChainTrace:
    """
    Particle marginal Metropolis-Hastings.

    The likelihood is replaced by the particle filter's estimate; the
    estimate is unbiased and nonnegative, so the chain still targets
    p(theta | y_1:T). A degenerate filter at a proposed theta rejects it.

    Args:
        N: Particles per likelihood estimate
        M: Number of iterations
        **smc_options: Passed to ``estimate_loglik`` (twisted, resampling, ...)
    """
    theta0 = _initial_theta(model, prior, theta0)

    def loglik(theta, r):
        return estimate_loglik(model, data, theta, N, r, **smc_options)

    trace = metropolis_hastings(loglik, prior, theta0, proposal, M, rng, burn_in)
    trace.config = {"algorithm": "pmmh", "N": N, "M": M}
    return trace


def _initial_theta(model: StateSpaceModel, prior: Prior, theta0: Optional[ParameterVector]) -> ParameterVector:
    if theta0 is not None:
        return theta0
    free = [name for name in model.default_free() if name in prior.free_names()]
    return model.parameters(free=free)


# ---------------------------------------------------------------------------
# Gibbs
# ---------------------------------------------------------------------------

def gibbs_sweep(components: Sequence[Callable[[Any, RandomStream], Any]], state: Any, rng: RandomStream) -> Any:
    """
    One systematic-scan sweep: each conditional sampler updates its block in turn.

    Args:
        components: Samplers (state, rng) -> state, applied in order
        state: Current joint state
        rng: Random stream; component i draws from rng.split(i)
    """
    for i, component in enumerate(components):
        state = component(state, rng.split(i))
    return state


def particle_gibbs(model: StateSpaceModel, data: Dataset, prior: Prior, N: int, M: int, rng: RandomStream,
                   ancestor_sampling: bool = False,
                   param_conditional: Optional[Callable[..., ParameterVector]] = None,
                   theta0: Optional[ParameterVector] = None, reference: Optional[np.ndarray] = None,
                   keep_trajectories: bool = False) -> ChainTrace:
    """
    Particle Gibbs, optionally with ancestor sampling (PGAS).

    Alternates a conditional-SMC sweep given theta with a draw of theta
    from p(theta | x_1:T, y_1:T).

    Args:
        prior: Prior handed to the parameter conditional
        N: Particles of the conditional SMC (>= 2)
        M: Number of iterations
        ancestor_sampling: PGAS; needs a transition density
        param_conditional: (path, data, theta, prior, rng) -> theta; defaults to the model's
        theta0: Initial parameters (defaults to the model defaults, free where the prior is not a point mass)
        reference: Initial reference trajectory (defaults to a draw from an unconditional run)
        keep_trajectories: Store the reference trajectory of every iteration

    Raises:
        CapabilityError: no parameter conditional, or ancestor sampling without a transition density
    """
    algorithm = "pgas" if ancestor_sampling else "pg"
    if param_conditional is None:
        model.require("parameter_conditional", algorithm)
        param_conditional = model.parameter_conditional
    if ancestor_sampling:
        model.require("transition_density", algorithm)
    theta = _initial_theta(model, prior, theta0)
    if reference is None:
        reference = initial_reference(model, data, theta, N, rng.split(0))

    names = tuple(theta.free) if theta.free else tuple(theta.names)
    trace = ChainTrace(names, trajectories=[] if keep_trajectories else None, seed=rng.seed,
                       config={"algorithm": algorithm, "N": N, "M": M})
    last_logz = [math.nan]

    def draw_trajectory(state, r):
        current_theta, current_ref = state
        new_ref, ensemble = csmc_run(model, data, current_theta, current_ref, N, r,
                                     ancestor_sampling=ancestor_sampling, return_ensemble=True)
        last_logz[0] = ensemble.logZ
        return current_theta, new_ref

    def draw_parameters(state, r):
        current_theta, current_ref = state
        if not current_theta.free:
            return state
        return param_conditional(current_ref, data, current_theta, prior, r), current_ref

    state = (theta, np.asarray(reference))
    for m in range(M):
        state = gibbs_sweep([draw_trajectory, draw_parameters], state, rng.split(m + 1))
        trace.append(state[0], math.nan, True, last_logz[0], trajectory=state[1])
        if (m + 1) % max(1, M // 10) == 0:
            logger.info("%s iteration %d/%d: %s", algorithm.upper(), m + 1, M,
                        {name: round(state[0][name], 6) for name in names})
    return trace


# ---------------------------------------------------------------------------
# Conjugate updates
# ---------------------------------------------------------------------------

def conjugate_beta_binomial_update(alpha: float, beta: float, successes: float, trials: float,
                                   rng: RandomStream) -> float:
    """
    Draw from Beta(alpha + s, beta + n - s).

    Raises:
        InputError: counts outside 0 <= s <= n or nonpositive prior parameters
    """
    if not (0 <= successes <= trials):
        raise InputError("Beta-binomial update needs 0 <= successes <= trials", successes=successes, trials=trials)
    if alpha <= 0 or beta <= 0:
        raise InputError("Beta prior parameters must be positive", alpha=alpha, beta=beta)
    return float(rng.beta(alpha + successes, beta + trials - successes))


def conjugate_invgamma_variance_update(a: float, b: float, residuals: Sequence[float], rng: RandomStream) -> float:
    """Draw a variance from InverseGamma(a + n/2, b + sum(r^2)/2)."""
    r = np.asarray(residuals, dtype=float).ravel()
    shape = a + 0.5 * r.size
    scale = b + 0.5 * float(r @ r)
    return float(scale / rng.gamma(shape))


def conjugate_gaussian_linear_update(prior_means: np.ndarray, prior_vars: np.ndarray, design: np.ndarray,
                                     response: np.ndarray, noise_var: float, rng: RandomStream) -> np.ndarray:
    """
    Exact conditional of coefficients c in response = design c + N(0, noise_var) under independent Gaussian priors.

    Returns:
        One draw of c
    """
    m0 = np.asarray(prior_means, dtype=float)
    v0 = np.asarray(prior_vars, dtype=float)
    X = np.atleast_2d(np.asarray(design, dtype=float))
    y = np.asarray(response, dtype=float).ravel()
    if X.shape != (y.size, m0.size):
        raise InputError("Design does not match response and prior", design=X.shape, response=y.size,
                         coefficients=m0.size)
    precision = np.diag(1.0 / v0) + X.T @ X / noise_var
    chol = linalg.cholesky(precision, lower=True)
    mean = linalg.cho_solve((chol, True), m0 / v0 + X.T @ y / noise_var)
    z = rng.standard_normal(m0.size)
    return mean + linalg.solve_triangular(chol.T, z, lower=False)


def pool_chains(traces: Sequence[ChainTrace], burn_in: Optional[int] = None) -> ChainTrace:
    """
    Concatenate independent chains after dropping each chain's burn-in.

    Args:
        burn_in: Samples dropped from every chain (default: each chain's M/10)

    Raises:
        InputError: no chains or chains over different parameters
    """
    if not traces:
        raise InputError("No chains to pool")
    names = tuple(traces[0].param_names)
    pooled = ChainTrace(names, config={"pooled_chains": len(traces)})
    for trace in traces:
        if tuple(trace.param_names) != names:
            raise InputError("Chains sample different parameters", first=list(names), other=list(trace.param_names))
        start = trace.resolve_burn_in(burn_in)
        pooled.thetas.extend(trace.thetas[start:])
        pooled.log_target.extend(trace.log_target[start:])
        pooled.logz.extend(trace.logz[start:])
        pooled.accepted.extend(trace.accepted[start:])
    pooled.config["burn_in"] = burn_in
    return pooled
