"""
Linear-Gaussian state-space model.

Any dimension is supported for filtering and simulation. Scalar models
(one state, one output, at most one input) additionally expose the named
parameters A, B, C, D, Q, R with analytic derivatives, complete-data
statistics and conjugate parameter conditionals.
"""

from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..core import Dataset, InverseGamma, Gaussian, ParameterVector, Prior, RandomStream
from ..errors import CapabilityError
from ..gaussian import LgssSpec, gaussian_logpdf, kalman_filter
from .base import Derivatives, StateSpaceModel, regression_update, select_derivatives

SCALAR_PARAMS = ("A", "B", "C", "D", "Q", "R")


class LgssModel(StateSpaceModel):
    """x_t ~ N(A x_{t-1} + B u_t, Q), y_t ~ N(C x_t + D u_t, R), x_1 ~ N(mu1, P1)."""

    name = "lgss"

    def __init__(self, spec: LgssSpec, **options):
        super().__init__(**options)
        self.spec = spec
        self._spec_cache = None
        self.state_dim = spec.state_dim
        self.obs_dim = spec.obs_dim
        self.scalar = spec.state_dim == 1 and spec.obs_dim == 1 and spec.input_dim <= 1
        self.param_names = SCALAR_PARAMS if self.scalar else ()
        features = {"initial_density", "transition_density", "linearization", "exact_likelihood"}
        if self.scalar:
            features |= {"grad_logs", "sufficient_statistics", "parameter_conditional"}
        self.features = frozenset(features)

    # -- parameters ---------------------------------------------------

    def default_parameters(self) -> Dict[str, float]:
        if not self.scalar:
            return {}
        s = self.spec
        has_input = s.input_dim == 1
        return {
            "A": float(s.A[0, 0]),
            "B": float(s.B[0, 0]) if has_input else 0.0,
            "C": float(s.C[0, 0]),
            "D": float(s.D[0, 0]) if has_input else 0.0,
            "Q": float(s.Q[0, 0]),
            "R": float(s.R[0, 0]),
        }

    def parameter_bounds(self) -> Dict[str, Tuple[float, float]]:
        if not self.scalar:
            return {}
        return {"Q": (0.0, np.inf), "R": (0.0, np.inf)}

    def default_prior(self) -> Optional[Prior]:
        if not self.scalar:
            return None
        return Prior({"Q": InverseGamma(0.01, 0.01), "R": InverseGamma(0.01, 0.01)})

    def spec_for(self, theta: ParameterVector) -> LgssSpec:
        """LgssSpec with the scalar parameters of theta substituted."""
        if not self.scalar:
            return self.spec
        key = tuple(theta[name] for name in SCALAR_PARAMS)
        cached = self._spec_cache
        if cached is not None and cached[0] == key:
            return cached[1]
        s = self.spec
        with_input = s.input_dim == 1
        spec = LgssSpec.scalar(theta["A"], theta["B"], theta["C"], theta["D"], theta["Q"], theta["R"],
                               float(s.mu1[0]), float(s.P1[0, 0]), with_input=with_input)
        self._spec_cache = (key, spec)
        return spec

    # -- densities ----------------------------------------------------

    def _input_term(self, matrix: np.ndarray, u: np.ndarray) -> np.ndarray:
        if matrix.shape[1] == 0:
            return np.zeros(matrix.shape[0])
        return matrix @ np.asarray(u, dtype=float)[: matrix.shape[1]]

    def sample_initial(self, theta, n, rng, data=None):
        s = self.spec
        return rng.multivariate_normal(s.mu1, s.P1, size=n)

    def initial_logpdf(self, x, theta, data=None):
        return gaussian_logpdf(x, self.spec.mu1, self.spec.P1)

    def transition_mean(self, x_prev, u, t, theta):
        s = self.spec_for(theta)
        return np.asarray(x_prev, dtype=float) @ s.A.T + self._input_term(s.B, u)

    def sample_transition(self, x_prev, u, t, theta, rng):
        s = self.spec_for(theta)
        mean = self.transition_mean(x_prev, u, t, theta)
        return mean + rng.multivariate_normal(np.zeros(self.state_dim), s.Q, size=mean.shape[0])

    def transition_logpdf(self, x, x_prev, u, t, theta):
        s = self.spec_for(theta)
        diff = np.asarray(x, dtype=float) - self.transition_mean(x_prev, u, t, theta)
        return gaussian_logpdf(diff, np.zeros(self.state_dim), s.Q)

    def observation_mean(self, x, u, t, theta):
        s = self.spec_for(theta)
        return np.asarray(x, dtype=float) @ s.C.T + self._input_term(s.D, u)

    def observation_logpdf(self, y, x, u, t, theta):
        s = self.spec_for(theta)
        diff = np.asarray(y, dtype=float) - self.observation_mean(x, u, t, theta)
        return gaussian_logpdf(diff, np.zeros(self.obs_dim), s.R)

    def sample_observation(self, x, u, t, theta, rng):
        s = self.spec_for(theta)
        mean = self.observation_mean(x, u, t, theta)
        return mean + rng.multivariate_normal(np.zeros(self.obs_dim), s.R, size=mean.shape[0])

    # -- linearization (exact) ----------------------------------------

    def transition_jacobian(self, x_prev, u, t, theta):
        return self.spec_for(theta).A

    def transition_covariance(self, theta):
        return self.spec_for(theta).Q

    def observation_jacobian(self, x, u, t, theta):
        return self.spec_for(theta).C

    def observation_covariance(self, theta):
        return self.spec_for(theta).R

    def initial_moments(self, theta, data=None):
        return self.spec.mu1, self.spec.P1

    def exact_loglik(self, data: Dataset, theta: ParameterVector) -> float:
        return kalman_filter(self.spec_for(theta), data)[1]

    # -- derivatives (scalar only) ------------------------------------

    def _scalar_input(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float)
        return float(u[0]) if self.spec.input_dim == 1 and u.size else 0.0

    @staticmethod
    def _gaussian_regression_derivatives(r, z, w, var) -> Tuple[np.ndarray, np.ndarray]:
        """Derivatives of ln N(r; 0, var) with r = target - a z - b w in (a, b, var)."""
        n = r.shape[0]
        grad = np.stack([r * z / var, r * w / var, -0.5 / var + r ** 2 / (2 * var ** 2)], axis=1)
        hess = np.zeros((n, 3, 3))
        hess[:, 0, 0] = -z ** 2 / var
        hess[:, 0, 1] = hess[:, 1, 0] = -z * w / var
        hess[:, 0, 2] = hess[:, 2, 0] = -r * z / var ** 2
        hess[:, 1, 1] = -w ** 2 / var
        hess[:, 1, 2] = hess[:, 2, 1] = -r * w / var ** 2
        hess[:, 2, 2] = 0.5 / var ** 2 - r ** 2 / var ** 3
        return grad, hess

    @staticmethod
    def _place(grad3: np.ndarray, hess3: np.ndarray, positions: Sequence[int], names) -> Derivatives:
        n = grad3.shape[0]
        grad = np.zeros((n, 6))
        hess = np.zeros((n, 6, 6))
        for i, pi in enumerate(positions):
            grad[:, pi] = grad3[:, i]
            for j, pj in enumerate(positions):
                hess[:, pi, pj] = hess3[:, i, j]
        return select_derivatives(grad, hess, SCALAR_PARAMS, names)

    def transition_derivatives(self, x, x_prev, u, t, theta, names) -> Derivatives:
        self.require("grad_logs")
        u_t = self._scalar_input(u)
        xp = np.asarray(x_prev, dtype=float)[:, 0]
        r = np.asarray(x, dtype=float)[:, 0] - theta["A"] * xp - theta["B"] * u_t
        grad3, hess3 = self._gaussian_regression_derivatives(r, xp, np.full_like(xp, u_t), theta["Q"])
        return self._place(grad3, hess3, (0, 1, 4), names)

    def observation_derivatives(self, y, x, u, t, theta, names) -> Derivatives:
        self.require("grad_logs")
        u_t = self._scalar_input(u)
        xs = np.asarray(x, dtype=float)[:, 0]
        r = float(np.asarray(y)[0]) - theta["C"] * xs - theta["D"] * u_t
        grad3, hess3 = self._gaussian_regression_derivatives(r, xs, np.full_like(xs, u_t), theta["R"])
        return self._place(grad3, hess3, (2, 3, 5), names)

    # -- learning hooks -----------------------------------------------

    def _regression_rows(self, paths: np.ndarray, data: Dataset):
        """Per-trajectory (transition, observation) regression vectors."""
        x = np.asarray(paths, dtype=float)[:, :, 0]
        u = np.array([self._scalar_input(data.u(t)) for t in range(data.T)])
        M = x.shape[0]
        trans = np.stack([x[:, 1:], x[:, :-1], np.broadcast_to(u[1:], (M, data.T - 1))], axis=2)
        observed = data.observed_mask
        y = data.observations[observed, 0]
        obs = np.stack([np.broadcast_to(y, (M, y.size)), x[:, observed], np.broadcast_to(u[observed], (M, y.size))],
                       axis=2)
        return trans, obs

    def complete_data_statistics(self, paths, weights, data, theta) -> Dict[str, np.ndarray]:
        self.require("sufficient_statistics")
        trans, obs = self._regression_rows(paths, data)
        w = np.asarray(weights, dtype=float)
        return {
            "transition_moments": np.einsum("m,mti,mtj->ij", w, trans, trans),
            "observation_moments": np.einsum("m,mti,mtj->ij", w, obs, obs),
            "transition_count": np.array(float(data.T - 1)),
            "observation_count": np.array(float(data.num_observed)),
        }

    def maximize_statistics(self, statistics: Mapping[str, np.ndarray], theta: ParameterVector) -> ParameterVector:
        free = set(theta.free)
        updates = {}
        if free & {"A", "B", "Q"} and float(statistics["transition_count"]) > 0:
            coefs, var = regression_update(
                statistics["transition_moments"], float(statistics["transition_count"]),
                np.array([theta["A"], theta["B"]]),
                np.array(["A" in free, "B" in free and self.spec.input_dim == 1]),
                theta["Q"], "Q" in free,
            )
            updates.update({"A": coefs[0], "B": coefs[1], "Q": var})
        if free & {"C", "D", "R"}:
            coefs, var = regression_update(
                statistics["observation_moments"], float(statistics["observation_count"]),
                np.array([theta["C"], theta["D"]]),
                np.array(["C" in free, "D" in free and self.spec.input_dim == 1]),
                theta["R"], "R" in free,
            )
            updates.update({"C": coefs[0], "D": coefs[1], "R": var})
        return theta.clipped(**{name: value for name, value in updates.items() if name in free})

    def parameter_conditional(self, path, data, theta, prior, rng) -> ParameterVector:
        """
        Conjugate Gibbs block: Gaussian coefficients (A, B, C, D) given
        Gaussian priors, then inverse-gamma variances (Q, R).
        """
        from ..learn_bayes import conjugate_gaussian_linear_update, conjugate_invgamma_variance_update

        self.require("parameter_conditional")
        trans, obs = self._regression_rows(np.asarray(path)[None], data)
        trans, obs = trans[0], obs[0]
        current = dict(theta.values)
        blocks = (
            (trans, ("A", "B"), "Q"),
            (obs, ("C", "D"), "R"),
        )
        for rows, coef_names, var_name in blocks:
            for j, name in enumerate(coef_names):
                if name not in theta.free:
                    continue
                dist = prior[name] if name in prior else None
                if not isinstance(dist, Gaussian):
                    raise CapabilityError("Conjugate update needs a Gaussian prior", parameter=name)
                other = coef_names[1 - j]
                response = rows[:, 0] - current[other] * rows[:, 2 - j]
                current[name] = conjugate_gaussian_linear_update(
                    np.array([dist.mean]), np.array([dist.var]), rows[:, 1 + j:2 + j], response,
                    current[var_name], rng,
                )[0]
            if var_name in theta.free:
                dist = prior[var_name] if var_name in prior else None
                if not isinstance(dist, InverseGamma):
                    raise CapabilityError("Conjugate update needs an inverse-gamma prior", parameter=var_name)
                residuals = rows[:, 0] - current[coef_names[0]] * rows[:, 1] - current[coef_names[1]] * rows[:, 2]
                current[var_name] = conjugate_invgamma_variance_update(dist.a, dist.b, residuals, rng)
        return theta.replace(**{name: current[name] for name in theta.free})


def lgss_model(spec: LgssSpec, **options) -> LgssModel:
    """Registry factory for a validated LgssSpec."""
    return LgssModel(spec, **options)


def demo_spec(with_input: bool = False) -> LgssSpec:
    """Scalar model used by the ``lgss-demo`` preset."""
    return LgssSpec.scalar(A=0.9, B=0.5 if with_input else 0.0, C=1.0, D=0.0, Q=0.5, R=1.0,
                           mu1=0.0, P1=1.0, with_input=with_input)
