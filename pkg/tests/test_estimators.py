"""
Tests for likelihood, score and Hessian estimators and the evaluation metrics.
"""

import math

import numpy as np
import pytest

from particle_sysid.core import Dataset, ParameterVector, RandomStream
from particle_sysid.errors import CapabilityError, DomainError, InputError
from particle_sysid.estimators import (
    acf,
    chain_effective_sample_size,
    e_rms,
    estimate_loglik,
    finite_difference_gradient,
    integrated_autocorrelation_time,
    score_and_hessian,
    simulate_output,
)
from particle_sysid.gaussian import LgssSpec
from particle_sysid.systems.hmm import toy_hmm
from particle_sysid.systems.lgss import LgssModel, demo_spec


def lgss_problem(T=20, seed=0, free=("A", "Q", "R")):
    model = LgssModel(demo_spec())
    theta = model.parameters(free=free)
    _, data = model.simulate(theta, T, RandomStream(seed))
    return model, theta, data


class TestEstimateLoglik:
    """Test particle likelihood estimates."""

    def test_bootstrap_close_to_exact(self):
        model, theta, data = lgss_problem(T=20)
        estimate = estimate_loglik(model, data, theta, 2000, RandomStream(1))
        assert estimate == pytest.approx(model.exact_loglik(data, theta), abs=0.5)

    def test_twisted_matched_is_exact(self):
        model, theta, data = lgss_problem(T=20)
        estimate = estimate_loglik(model, data, theta, 5, RandomStream(1), twisted=True, matched_proposal=True)
        assert abs(estimate - model.exact_loglik(data, theta)) < 1e-6

    def test_unbiased_on_likelihood_scale(self):
        """The average of exp(ln Z) over independent runs approaches p(y)."""
        hmm = toy_hmm(num_states=2, num_symbols=2, seed=1)
        theta = hmm.parameters()
        data = Dataset(None, [0.0, 1.0, 1.0])
        root = RandomStream(3)
        estimates = [math.exp(estimate_loglik(hmm, data, theta, 4, root.split(i))) for i in range(4000)]
        assert np.mean(estimates) == pytest.approx(math.exp(hmm.exact_loglik(data)), rel=0.05)


class TestScoreAndHessian:
    """Test particle score and Hessian estimates."""

    def test_score_close_to_finite_differences(self):
        model, theta, data = lgss_problem(T=20, seed=2)
        grad, hess, logz = score_and_hessian(model, data, theta, 3000, RandomStream(4), return_loglik=True)
        exact = finite_difference_gradient(lambda th: model.exact_loglik(data, th), theta)
        assert grad.shape == (3,)
        assert hess.shape == (3, 3)
        np.testing.assert_allclose(hess, hess.T)
        np.testing.assert_allclose(grad, exact, rtol=0.3, atol=1.5)
        assert math.isfinite(logz)

    @pytest.mark.slow
    def test_hessian_close_to_finite_differences(self):
        model, theta, data = lgss_problem(T=50, seed=7, free=("Q",))
        h = 1e-3
        q = theta["Q"]
        exact = (model.exact_loglik(data, theta.replace(Q=q + h)) - 2.0 * model.exact_loglik(data, theta)
                 + model.exact_loglik(data, theta.replace(Q=q - h))) / h ** 2
        root = RandomStream(8)
        hessians = [score_and_hessian(model, data, theta, 2000, root.split(s))[1][0, 0] for s in range(20)]
        assert exact < 0
        assert np.mean(hessians) == pytest.approx(exact, rel=0.15)

    @pytest.mark.slow
    def test_gradient_error_shrinks_with_particles(self):
        model, theta, data = lgss_problem(T=50, seed=9, free=("Q",))
        exact = finite_difference_gradient(lambda th: model.exact_loglik(data, th), theta)[0]
        root = RandomStream(10)
        medians = []
        for N in (100, 400, 1600):
            errors = [abs(score_and_hessian(model, data, theta, N, root.split(N).split(s))[0][0] - exact)
                      for s in range(20)]
            medians.append(np.median(errors))
        assert medians[0] > medians[1] > medians[2]

    def test_named_subset(self):
        model, theta, data = lgss_problem(T=10)
        grad, hess = score_and_hessian(model, data, theta, 200, RandomStream(0), names=("R",))
        assert grad.shape == (1,)
        assert hess.shape == (1, 1)

    def test_needs_parameter_derivatives(self):
        hmm = toy_hmm()
        with pytest.raises(CapabilityError):
            score_and_hessian(hmm, Dataset(None, [0.0, 1.0]), hmm.parameters(), 10, RandomStream(0))


class TestFiniteDifferenceGradient:
    """Test the finite-difference reference gradient."""

    def test_quadratic(self):
        theta = ParameterVector({"Q": 1.0, "m": 0.5}, {"Q": (0.0, math.inf)}, free=("Q", "m"))
        grad = finite_difference_gradient(lambda th: -(th["Q"] - 2.0) ** 2 - 3.0 * th["m"] ** 2, theta)
        np.testing.assert_allclose(grad, [2.0, -3.0], rtol=1e-6)


class TestSimulationError:
    """Test noise-free rollouts and e_rms."""

    def test_known_value(self):
        assert e_rms([1.0, 2.0], [0.0, 0.0]) == pytest.approx(math.sqrt(5 / 2))

    def test_perfect_prediction(self):
        assert e_rms(np.ones((4, 2)), np.ones((4, 2))) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            e_rms([1.0, 2.0], [0.0])

    def test_missing_entries(self):
        with pytest.raises(InputError):
            e_rms([1.0, np.nan], [0.0, 0.0])

    def test_metric_properties(self):
        rng = RandomStream(12)
        for _ in range(50):
            a, b, c = (rng.normal(size=(30, 2)) for _ in range(3))
            assert e_rms(a, b) >= 0.0
            assert e_rms(a, a) == 0.0
            assert e_rms(a, b) > 0.0
            assert e_rms(a, b) == pytest.approx(e_rms(b, a))
            assert e_rms(a, c) <= e_rms(a, b) + e_rms(b, c) + 1e-12

    def test_rollout_of_linear_model(self):
        model = LgssModel(LgssSpec.scalar(A=0.9, C=2.0, Q=0.5, R=1.0))
        out = simulate_output(model, np.zeros((5, 0)), model.parameters(), [1.0])
        np.testing.assert_allclose(out[:, 0], 2.0 * 0.9 ** np.arange(5))


class TestAutocorrelation:
    """Test chain diagnostics."""

    def test_ar1_series(self):
        rng = RandomStream(0)
        phi = 0.5
        noise = rng.standard_normal(50_000)
        x = np.zeros_like(noise)
        for i in range(1, x.size):
            x[i] = phi * x[i - 1] + noise[i]
        series = acf(x, 20)
        assert series.values[0] == 1.0
        assert series.values[1] == pytest.approx(phi, abs=0.02)
        assert series.iact == pytest.approx((1 + phi) / (1 - phi), abs=0.4)
        assert integrated_autocorrelation_time(x, 20) == series.iact
        assert chain_effective_sample_size(x, 20) == pytest.approx(x.size / series.iact)

    def test_white_noise_iact_near_one(self):
        x = RandomStream(1).standard_normal(20_000)
        assert integrated_autocorrelation_time(x, 50) < 1.3

    def test_series_too_short(self):
        with pytest.raises(InputError):
            acf([1.0, 2.0, 3.0], 3)

    def test_constant_series(self):
        with pytest.raises(DomainError):
            acf(np.ones(10), 2)
