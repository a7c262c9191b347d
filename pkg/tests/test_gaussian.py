"""
Tests for exact linear-Gaussian inference and the twisting recursions.
"""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from particle_sysid.core import Dataset, RandomStream
from particle_sysid.errors import InputError, NumericalError
from particle_sysid.gaussian import (
    LgssSpec,
    TwistTables,
    ekf_twisting,
    gaussian_logpdf,
    gaussian_message_integral,
    kalman_filter,
    lgss_simulate,
    rts_smoother,
)
from particle_sysid.systems.lgss import LgssModel


def two_state_spec():
    return LgssSpec(
        A=[[0.8, 0.2], [-0.1, 0.9]],
        B=np.zeros((2, 0)),
        C=[[1.0, 0.5]],
        D=np.zeros((1, 0)),
        Q=[[0.3, 0.05], [0.05, 0.2]],
        R=[[0.5]],
        mu1=[0.2, -0.1],
        P1=[[1.0, 0.1], [0.1, 0.8]],
    )


def dense_moments(spec, T):
    """Joint mean and covariance of the stacked states x_1..x_T."""
    d = spec.state_dim
    means = [spec.mu1]
    covs = [spec.P1]
    for _ in range(1, T):
        means.append(spec.A @ means[-1])
        covs.append(spec.A @ covs[-1] @ spec.A.T + spec.Q)
    sigma = np.zeros((T * d, T * d))
    for t in range(T):
        for s in range(t + 1):
            block = np.linalg.matrix_power(spec.A, t - s) @ covs[s]
            sigma[t * d:(t + 1) * d, s * d:(s + 1) * d] = block
            sigma[s * d:(s + 1) * d, t * d:(t + 1) * d] = block.T
    return np.concatenate(means), sigma


class TestLgssSpec:
    """Test validation of linear-Gaussian model matrices."""

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            LgssSpec(A=[[1.0]], B=np.zeros((1, 0)), C=[[1.0, 0.0]], D=np.zeros((1, 0)),
                     Q=[[1.0]], R=[[1.0]], mu1=[0.0], P1=[[1.0]])

    def test_indefinite_noise_rejected(self):
        with pytest.raises(InputError):
            LgssSpec.scalar(Q=-1.0)

    def test_scalar_with_input(self):
        spec = LgssSpec.scalar(A=0.5, B=2.0, with_input=True)
        assert spec.input_dim == 1
        assert LgssSpec.scalar().input_dim == 0


class TestKalmanFilter:
    """Test the Kalman filter against dense Gaussian computations."""

    def test_loglik_matches_dense_oracle(self):
        spec = two_state_spec()
        T = 5
        _, data = lgss_simulate(spec, T, RandomStream(0))
        mean_x, sigma_x = dense_moments(spec, T)
        C_big = np.kron(np.eye(T), spec.C)
        cov_y = C_big @ sigma_x @ C_big.T + np.kron(np.eye(T), spec.R)
        expected = stats.multivariate_normal(C_big @ mean_x, cov_y).logpdf(data.observations.ravel())
        _, loglik = kalman_filter(spec, data)
        assert loglik == pytest.approx(expected, rel=1e-10)

    def test_missing_observation_skips_update(self):
        spec = two_state_spec()
        data = Dataset(None, [0.5, np.nan, -0.4])
        beliefs, loglik = kalman_filter(spec, data)
        mean_x, sigma_x = dense_moments(spec, 3)
        rows = [0, 2]
        C_obs = np.kron(np.eye(3), spec.C)[rows]
        cov_y = C_obs @ sigma_x @ C_obs.T + np.eye(2) * spec.R[0, 0]
        expected = stats.multivariate_normal(C_obs @ mean_x, cov_y).logpdf([0.5, -0.4])
        assert loglik == pytest.approx(expected, rel=1e-10)
        # prediction only at the unobserved step
        np.testing.assert_allclose(beliefs[1].mean, spec.A @ beliefs[0].mean)

    def test_steady_state_covariance(self):
        """A=C=Q=R=1 converges to the positive root of p^2 + p - 1."""
        spec = LgssSpec.scalar(A=1.0, C=1.0, Q=1.0, R=1.0, mu1=0.0, P1=1.0)
        data = Dataset(None, np.zeros(60))
        beliefs, _ = kalman_filter(spec, data)
        assert beliefs[-1].cov[0, 0] == pytest.approx((math.sqrt(5) - 1) / 2, rel=1e-10)

    def test_singular_innovation(self):
        spec = LgssSpec.scalar(A=1.0, C=1.0, Q=1.0, R=0.0, mu1=0.0, P1=0.0)
        with pytest.raises(NumericalError) as excinfo:
            kalman_filter(spec, Dataset(None, [0.0, 1.0]))
        assert excinfo.value.step == 0

    def test_observation_dimension_checked(self):
        spec = two_state_spec()
        with pytest.raises(InputError):
            kalman_filter(spec, Dataset(None, np.zeros((3, 2))))


class TestRtsSmoother:
    """Test fixed-interval smoothing."""

    def test_last_step_equals_filter(self):
        spec = two_state_spec()
        _, data = lgss_simulate(spec, 8, RandomStream(1))
        filtered, _ = kalman_filter(spec, data)
        smoothed, cross = rts_smoother(spec, data)
        np.testing.assert_allclose(smoothed[-1].mean, filtered[-1].mean)
        np.testing.assert_allclose(smoothed[-1].cov, filtered[-1].cov)
        assert len(cross) == 7

    def test_matches_dense_conditioning(self):
        spec = two_state_spec()
        T = 4
        _, data = lgss_simulate(spec, T, RandomStream(2))
        mean_x, sigma_x = dense_moments(spec, T)
        C_big = np.kron(np.eye(T), spec.C)
        cov_y = C_big @ sigma_x @ C_big.T + np.kron(np.eye(T), spec.R)
        gain = sigma_x @ C_big.T @ np.linalg.inv(cov_y)
        post_mean = mean_x + gain @ (data.observations.ravel() - C_big @ mean_x)
        post_cov = sigma_x - gain @ C_big @ sigma_x
        smoothed, cross = rts_smoother(spec, data)
        for t in range(T):
            np.testing.assert_allclose(smoothed[t].mean, post_mean[2 * t:2 * t + 2], atol=1e-10)
            np.testing.assert_allclose(smoothed[t].cov, post_cov[2 * t:2 * t + 2, 2 * t:2 * t + 2], atol=1e-10)
        # cross[k] is Cov(x_{k+1}, x_k | y)
        np.testing.assert_allclose(cross[0], post_cov[2:4, 0:2], atol=1e-10)


class TestGaussianHelpers:
    """Test density and message helpers."""

    def test_logpdf_matches_scipy(self):
        cov = np.array([[1.0, 0.3], [0.3, 2.0]])
        x = np.array([[0.1, -0.5], [1.0, 2.0]])
        expected = stats.multivariate_normal([0.0, 1.0], cov).logpdf(x)
        np.testing.assert_allclose(gaussian_logpdf(x, [0.0, 1.0], cov), expected)

    def test_singular_covariance_support(self):
        cov = np.array([[1.0, 0.0], [0.0, 0.0]])
        values = gaussian_logpdf(np.array([[0.0, 0.0], [0.0, 1.0]]), np.zeros(2), cov)
        assert values[0] == pytest.approx(stats.norm.logpdf(0.0))
        assert values[1] == -math.inf

    def test_message_integral_matches_quadrature(self):
        a, b, c, q, mu = 0.7, 0.4, -0.3, 0.5, 0.9
        a_mu, b_mu, const, _ = gaussian_message_integral(np.array([[a]]), np.array([b]), c, np.array([[q]]))
        value, _ = integrate.quad(
            lambda x: math.exp(-0.5 * a * x * x + b * x + c) * stats.norm.pdf(x, mu, math.sqrt(q)),
            -20.0, 20.0,
        )
        closed = math.exp(-0.5 * a_mu[0, 0] * mu * mu + b_mu[0] * mu + const)
        assert closed == pytest.approx(value, rel=1e-8)

    def test_neutral_tables(self):
        tables = TwistTables.neutral(4, 2)
        assert tables.T == 4
        np.testing.assert_array_equal(tables.log_psi(2, np.ones((3, 2))), np.zeros(3))
        np.testing.assert_array_equal(tables.log_psi(-1, np.ones((3, 2))), np.zeros(3))


class TestEkfTwisting:
    """Test the backward twisting recursion."""

    def test_linear_model_potentials_are_exact(self):
        """For a linear model psi_t(x) equals p(y_{t+1:T} | x_t) computed by a Kalman pass."""
        spec = LgssSpec.scalar(A=0.9, C=1.0, Q=0.5, R=1.0, mu1=0.0, P1=1.0)
        model = LgssModel(spec)
        theta = model.parameters()
        data = Dataset(None, [0.3, -0.1, 0.8, 0.2])
        tables = ekf_twisting(model, data, theta)
        x0 = 0.6
        # future likelihood from a point mass at x0 on step 0
        future = LgssSpec.scalar(A=0.9, C=1.0, Q=0.5, R=1.0, mu1=0.9 * x0, P1=0.5)
        _, expected = kalman_filter(future, data.slice(1, 4))
        assert tables.log_psi(0, np.array([[x0]]))[0] == pytest.approx(expected, rel=1e-10)

    def test_final_table_is_zero(self):
        spec = two_state_spec()
        model = LgssModel(spec)
        _, data = lgss_simulate(spec, 6, RandomStream(3))
        tables = ekf_twisting(model, data, model.parameters())
        assert tables.T == 6
        assert np.all(tables.a[-1] == 0) and np.all(tables.b[-1] == 0) and tables.c[-1] == 0
