"""
Exact linear-Gaussian inference and extended-Kalman twisting.

The Kalman filter and RTS smoother are the oracles for everything particle
based in this package; ``ekf_twisting`` builds quadratic log-potentials
approximating ln p(y_{t+1:T} | x_t) for nonlinear models with declared
Jacobians.
"""

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Tuple

import numpy as np
from scipy import linalg

from .core import Dataset, ParameterVector, RandomStream
from .errors import InputError, NumericalError

if TYPE_CHECKING:
    from .systems.base import StateSpaceModel

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


def _matrix(value, rows: int, cols: int, label: str) -> np.ndarray:
    array = np.atleast_2d(np.asarray(value, dtype=float))
    if cols == 0:
        array = array.reshape(rows, 0) if array.size == 0 else array
    if array.shape != (rows, cols):
        raise InputError(f"{label} has the wrong shape", expected=(rows, cols), got=array.shape)
    return array


def _check_psd(matrix: np.ndarray, label: str) -> None:
    if not np.allclose(matrix, matrix.T, atol=1e-10):
        raise InputError(f"{label} must be symmetric", matrix=matrix.tolist())
    if matrix.size and np.linalg.eigvalsh(matrix).min() < -1e-10:
        raise InputError(f"{label} must be positive semi-definite", matrix=matrix.tolist())


@dataclass(eq=False)
class LgssSpec:
    """
    Linear-Gaussian state-space model

        x_{t+1} = A x_t + B u_{t+1} + v,   v ~ N(0, Q)
        y_t     = C x_t + D u_t + e,       e ~ N(0, R)
        x_1 ~ N(mu1, P1)
    """
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    mu1: np.ndarray
    P1: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        d = A.shape[0]
        if A.shape != (d, d):
            raise InputError("A must be square", got=A.shape)
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.shape[1] != d:
            raise InputError("C must have state_dim columns", expected=d, got=C.shape)
        dy = C.shape[0]
        B = np.asarray(self.B, dtype=float)
        du = 0 if B.size == 0 else np.atleast_2d(B).shape[1]
        self.A = A
        self.C = C
        self.B = _matrix(B, d, du, "B")
        self.D = _matrix(self.D, dy, du, "D") if du else np.zeros((dy, 0))
        self.Q = _matrix(self.Q, d, d, "Q")
        self.R = _matrix(self.R, dy, dy, "R")
        self.mu1 = np.asarray(self.mu1, dtype=float).reshape(d)
        self.P1 = _matrix(self.P1, d, d, "P1")
        for label in ("Q", "R", "P1"):
            _check_psd(getattr(self, label), label)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    @classmethod
    def scalar(cls, A: float = 1.0, B: float = 0.0, C: float = 1.0, D: float = 0.0,
               Q: float = 1.0, R: float = 1.0, mu1: float = 0.0, P1: float = 1.0,
               with_input: bool = False) -> "LgssSpec":
        if with_input:
            return cls([[A]], [[B]], [[C]], [[D]], [[Q]], [[R]], [mu1], [[P1]])
        return cls([[A]], np.zeros((1, 0)), [[C]], np.zeros((1, 0)), [[Q]], [[R]], [mu1], [[P1]])

    def _input(self, data: Dataset, t: int) -> np.ndarray:
        if self.input_dim == 0:
            return np.zeros(0)
        if data.input_dim != self.input_dim:
            raise InputError("Dataset input dimension does not match the model", expected=self.input_dim,
                             got=data.input_dim)
        return data.u(t)


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """
    Multivariate normal log-density, vectorized over the rows of x.

    Singular covariances are handled on their support: points off the
    support get -inf.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    diff = x - np.asarray(mean, dtype=float)
    d = cov.shape[0]
    try:
        chol = linalg.cholesky(cov, lower=True)
        z = linalg.solve_triangular(chol, diff.T, lower=True)
        return -0.5 * np.sum(z ** 2, axis=0) - np.sum(np.log(np.diag(chol))) - 0.5 * d * LOG_2PI
    except linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(cov)
    tol = 1e-12 * max(1.0, np.abs(w).max())
    pos = w > tol
    proj = diff @ V
    off_support = np.any(np.abs(proj[:, ~pos]) > 1e-9, axis=1)
    quad = np.sum(proj[:, pos] ** 2 / w[pos], axis=1)
    out = -0.5 * quad - 0.5 * np.sum(np.log(w[pos])) - 0.5 * pos.sum() * LOG_2PI
    return np.where(off_support, -np.inf, out)


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


@dataclass
class KalmanOutput:
    predicted_means: np.ndarray
    predicted_covs: np.ndarray
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    step_loglik: np.ndarray

    @property
    def loglik(self) -> float:
        return float(self.step_loglik.sum())


def kalman_pass(spec: LgssSpec, data: Dataset) -> KalmanOutput:
    """Forward pass keeping predicted and filtered moments of every step."""
    if data.obs_dim != spec.obs_dim:
        raise InputError("Dataset observation dimension does not match the model",
                         expected=spec.obs_dim, got=data.obs_dim)
    T, d = data.T, spec.state_dim
    pred_m = np.zeros((T, d))
    pred_P = np.zeros((T, d, d))
    filt_m = np.zeros((T, d))
    filt_P = np.zeros((T, d, d))
    step_loglik = np.zeros(T)
    identity = np.eye(d)
    m, P = spec.mu1.copy(), spec.P1.copy()
    for t in range(T):
        u = spec._input(data, t)
        if t > 0:
            m = spec.A @ m + spec.B @ u
            P = _symmetrize(spec.A @ P @ spec.A.T + spec.Q)
        pred_m[t], pred_P[t] = m, P
        if data.is_observed(t):
            S = _symmetrize(spec.C @ P @ spec.C.T + spec.R)
            try:
                factor = linalg.cho_factor(S, lower=True)
            except linalg.LinAlgError:
                raise NumericalError("Innovation covariance is singular", step=t) from None
            innovation = data.y(t) - spec.C @ m - spec.D @ u
            K = linalg.cho_solve(factor, spec.C @ P).T
            step_loglik[t] = float(gaussian_logpdf(innovation[None, :], np.zeros_like(innovation), S)[0])
            m = m + K @ innovation
            IKC = identity - K @ spec.C
            P = _symmetrize(IKC @ P @ IKC.T + K @ spec.R @ K.T)
        if not np.all(np.isfinite(P)) or (d and np.linalg.eigvalsh(P).min() < -1e-9 * max(1.0, np.abs(P).max())):
            raise NumericalError("Filter covariance lost positive semi-definiteness", step=t)
        filt_m[t], filt_P[t] = m, P
    return KalmanOutput(pred_m, pred_P, filt_m, filt_P, step_loglik)


def kalman_filter(spec: LgssSpec, data: Dataset) -> Tuple[List[GaussianBelief], float]:
    """
    Exact filtering moments and log-likelihood.

    Args:
        spec: Linear-Gaussian model
        data: Dataset; unobserved steps skip the update and add no likelihood term

    Returns:
        (filtered beliefs per step, ln p(y_1:T))

    Raises:
        NumericalError: singular innovation covariance (carries the step)
    """
    out = kalman_pass(spec, data)
    beliefs = [GaussianBelief(out.filtered_means[t], out.filtered_covs[t]) for t in range(data.T)]
    return beliefs, out.loglik


def rts_smoother(spec: LgssSpec, data: Dataset) -> Tuple[List[GaussianBelief], List[np.ndarray]]:
    """
    Fixed-interval smoothing moments.

    Returns:
        (smoothed beliefs per step, cross covariances Cov(x_t, x_{t-1} | y_1:T)
        for t = 1..T-1; the list is aligned so that entry k belongs to step k + 1)
    """
    out = kalman_pass(spec, data)
    T, d = data.T, spec.state_dim
    means = out.filtered_means.copy()
    covs = out.filtered_covs.copy()
    cross: List[np.ndarray] = [np.zeros((d, d))] * max(T - 1, 0)
    for t in range(T - 2, -1, -1):
        P_f, P_pred = out.filtered_covs[t], out.predicted_covs[t + 1]
        rhs = spec.A @ P_f
        try:
            J = linalg.solve(P_pred, rhs, assume_a="pos").T
        except (linalg.LinAlgError, ValueError):
            J = (np.linalg.pinv(P_pred) @ rhs).T
        means[t] = out.filtered_means[t] + J @ (means[t + 1] - out.predicted_means[t + 1])
        covs[t] = _symmetrize(P_f + J @ (covs[t + 1] - P_pred) @ J.T)
        cross[t] = covs[t + 1] @ J.T
    return [GaussianBelief(means[t], covs[t]) for t in range(T)], cross


def lgss_simulate(spec: LgssSpec, T: int, rng: RandomStream,
                  inputs: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Dataset]:
    """Draw states and a fully observed dataset of length T."""
    du = spec.input_dim
    inputs = np.zeros((T, du)) if inputs is None else np.asarray(inputs, dtype=float).reshape(T, du)
    d, dy = spec.state_dim, spec.obs_dim
    states = np.zeros((T, d))
    observations = np.zeros((T, dy))
    x = rng.multivariate_normal(spec.mu1, spec.P1)
    for t in range(T):
        if t > 0:
            x = spec.A @ x + spec.B @ inputs[t] + rng.multivariate_normal(np.zeros(d), spec.Q)
        states[t] = x
        observations[t] = spec.C @ x + spec.D @ inputs[t] + rng.multivariate_normal(np.zeros(dy), spec.R)
    return states, Dataset(inputs, observations, name="lgss-simulated")


# ---------------------------------------------------------------------------
# Twisting tables
# ---------------------------------------------------------------------------

@dataclass
class TwistTables:
    """
    Quadratic log-potentials log psi_t(x) = -1/2 x'a_t x + b_t'x + c_t.

    ``a, b, c`` hold psi_t (approximating ln p(y_{t+1:T} | x_t)); the
    ``message_*`` arrays additionally absorb the step's own observation,
    i.e. they represent ln [g(y_t | x) psi_t(x)] under the linearization and
    drive the matched Gaussian proposal.
    """
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    message_a: np.ndarray
    message_b: np.ndarray
    message_c: np.ndarray

    @property
    def T(self) -> int:
        return self.c.shape[0]

    @classmethod
    def neutral(cls, T: int, d: int) -> "TwistTables":
        zeros = (np.zeros((T, d, d)), np.zeros((T, d)), np.zeros(T))
        return cls(*zeros, *(z.copy() for z in zeros))

    def log_psi(self, t: int, x: np.ndarray) -> np.ndarray:
        """log psi_t at a batch of states; psi_{-1} is the constant 1."""
        x = np.asarray(x, dtype=float)
        if t < 0:
            return np.zeros(x.shape[0])
        quad = np.einsum("ni,ij,nj->n", x, self.a[t], x)
        return -0.5 * quad + x @ self.b[t] + self.c[t]


def gaussian_message_integral(message_a: np.ndarray, message_b: np.ndarray, message_c: float,
                              cov: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """
    Integrate exp(-1/2 x'Ax + b'x + c) against N(x; mu, cov) as a function of mu.

    Returns:
        (a_mu, b_mu, const, G) with the result exp(-1/2 mu'a_mu mu + b_mu'mu + const)
        and G = (I + A cov)^-1, which also defines the matched proposal
    """
    d = cov.shape[0]
    G = np.linalg.inv(np.eye(d) + message_a @ cov)
    a_mu = _symmetrize(G @ message_a)
    b_mu = G @ message_b
    sign, logdet = np.linalg.slogdet(np.eye(d) + cov @ message_a)
    if sign <= 0:
        raise NumericalError("Twisting message is not integrable against the transition")
    const = message_c + 0.5 * float(message_b @ cov @ G @ message_b) - 0.5 * logdet
    return a_mu, b_mu, const, G


def ekf_twisting(model: "StateSpaceModel", data: Dataset, theta: ParameterVector) -> TwistTables:
    """
    Backward information recursion for approximate optimal twisting potentials.

    Nominal linearization points come from a forward extended Kalman filter;
    the backward pass starts from psi_T = 1 and alternates absorbing the
    linearized observation and integrating through the linearized transition.
    For linear-Gaussian models the result is exact.

    Args:
        model: Model exposing the linearization hooks
        data: Dataset
        theta: Parameters

    Returns:
        TwistTables with a_T = b_T = c_T = 0

    Raises:
        CapabilityError: model declares no Jacobians
    """
    model.require("linearization", "twisted-smc")
    T, d = data.T, model.state_dim
    Q = np.atleast_2d(model.transition_covariance(theta))
    R = np.atleast_2d(model.observation_covariance(theta))

    # forward EKF for nominal points
    nominal = np.zeros((T, d))
    m, P = model.initial_moments(theta, data)
    m = np.asarray(m, dtype=float).reshape(d)
    P = np.atleast_2d(np.asarray(P, dtype=float))
    for t in range(T):
        u = data.u(t)
        if t > 0:
            F = model.transition_jacobian(m, u, t, theta)
            m = model.transition_mean(m[None, :], u, t, theta)[0]
            P = _symmetrize(F @ P @ F.T + Q)
        if data.is_observed(t):
            H = model.observation_jacobian(m, u, t, theta)
            S = _symmetrize(H @ P @ H.T + R)
            K = np.linalg.solve(S, H @ P).T
            m = m + K @ (data.y(t) - model.observation_mean(m[None, :], u, t, theta)[0])
            IKH = np.eye(d) - K @ H
            P = _symmetrize(IKH @ P @ IKH.T + K @ R @ K.T)
        nominal[t] = m

    tables = TwistTables.neutral(T, d)
    R_inv = np.linalg.inv(R)
    _, logdet_R = np.linalg.slogdet(2.0 * np.pi * R)
    for t in range(T - 1, -1, -1):
        A_msg, b_msg, c_msg = tables.a[t].copy(), tables.b[t].copy(), float(tables.c[t])
        if data.is_observed(t):
            u = data.u(t)
            H = model.observation_jacobian(nominal[t], u, t, theta)
            y_eff = data.y(t) - model.observation_mean(nominal[t][None, :], u, t, theta)[0] + H @ nominal[t]
            A_msg = A_msg + H.T @ R_inv @ H
            b_msg = b_msg + H.T @ R_inv @ y_eff
            c_msg = c_msg - 0.5 * float(y_eff @ R_inv @ y_eff) - 0.5 * logdet_R
        tables.message_a[t] = _symmetrize(A_msg)
        tables.message_b[t] = b_msg
        tables.message_c[t] = c_msg
        if t == 0:
            break
        u = data.u(t)
        F = model.transition_jacobian(nominal[t - 1], u, t, theta)
        f = model.transition_mean(nominal[t - 1][None, :], u, t, theta)[0] - F @ nominal[t - 1]
        a_mu, b_mu, const, _ = gaussian_message_integral(tables.message_a[t], b_msg, c_msg, Q)
        tables.a[t - 1] = _symmetrize(F.T @ a_mu @ F)
        tables.b[t - 1] = F.T @ (b_mu - a_mu @ f)
        tables.c[t - 1] = const - 0.5 * float(f @ a_mu @ f) + float(b_mu @ f)
    logger.debug("Built twisting tables for %d steps", T)
    return tables
