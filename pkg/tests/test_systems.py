"""
Tests for the model library and the model registry.

Covers the linear-Gaussian, water-tank, dengue and finite HMM models:
mean maps, densities, derivatives against finite differences, learning
hooks and the capability checks algorithms rely on.
"""

import math

import numpy as np
import pytest
from scipy.special import logsumexp

from particle_sysid.core import Dataset, Prior, RandomStream, log_joint
from particle_sysid.errors import CapabilityError, ConfigError, InputError
from particle_sysid.gaussian import LgssSpec
from particle_sysid.systems import FEATURES, ModelRegistry
from particle_sysid.systems.dengue import (
    EH,
    IH,
    IM,
    NEW_IH,
    RH,
    SH,
    TAU_H,
    Z,
    DengueModel,
    SeirParams,
    SeirState,
    weekly_reset_inputs,
)
from particle_sysid.systems.hmm import FiniteHmm, toy_hmm
from particle_sysid.systems.lgss import LgssModel, demo_spec
from particle_sysid.systems.watertank import (
    HEIGHT,
    PARAM_NAMES,
    STRUCTURES,
    WaterTankModel,
    WaterTankParams,
    WaterTankState,
    capped,
)


def numeric_derivatives(fn, theta, names, h=1e-5):
    """Central-difference gradient and Hessian of fn(theta) over names."""
    p = len(names)
    grad = np.zeros(p)
    hess = np.zeros((p, p))

    def shifted(*moves):
        updates = dict(theta.values)
        for name, step in moves:
            updates[name] += step
        return fn(theta.replace(**updates))

    for i, a in enumerate(names):
        grad[i] = (shifted((a, h)) - shifted((a, -h))) / (2 * h)
        for j, b in enumerate(names):
            hess[i, j] = (shifted((a, h), (b, h)) - shifted((a, h), (b, -h))
                          - shifted((a, -h), (b, h)) + shifted((a, -h), (b, -h))) / (4 * h * h)
    return grad, hess


class TestLgssModel:
    """Test the linear-Gaussian model."""

    def test_scalar_features(self):
        model = LgssModel(demo_spec())
        assert model.scalar
        for feature in FEATURES:
            assert model.supports_feature(feature)

    def test_multivariate_features(self):
        spec = LgssSpec(A=np.eye(2), B=np.zeros((2, 0)), C=[[1.0, 0.0]], D=np.zeros((1, 0)),
                        Q=np.eye(2), R=[[1.0]], mu1=[0.0, 0.0], P1=np.eye(2))
        model = LgssModel(spec)
        assert not model.supports_feature("grad_logs")
        assert model.supports_feature("exact_likelihood")
        assert model.parameters().names == ()

    def test_spec_for_substitutes_parameters(self):
        model = LgssModel(demo_spec(with_input=True))
        theta = model.parameters({"A": 0.5, "B": 2.0})
        spec = model.spec_for(theta)
        assert spec.A[0, 0] == 0.5
        assert spec.B[0, 0] == 2.0
        assert spec.input_dim == 1

    def test_derivatives_match_finite_differences(self):
        model = LgssModel(demo_spec(with_input=True))
        names = ("A", "B", "C", "D", "Q", "R")
        theta = model.parameters({"A": 0.7, "B": 0.3, "C": 1.2, "D": -0.4, "Q": 0.6, "R": 0.9})
        x, x_prev, u, y = np.array([[0.4]]), np.array([[1.1]]), np.array([0.5]), np.array([0.8])
        g_tr, h_tr = model.transition_derivatives(x, x_prev, u, 1, theta, names)
        g_obs, h_obs = model.observation_derivatives(y, x, u, 1, theta, names)
        fd_g, fd_h = numeric_derivatives(
            lambda th: float(model.transition_logpdf(x, x_prev, u, 1, th)[0])
            + float(model.observation_logpdf(y, x, u, 1, th)[0]),
            theta, names,
        )
        np.testing.assert_allclose(g_tr[0] + g_obs[0], fd_g, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(h_tr[0] + h_obs[0], fd_h, rtol=1e-3, atol=1e-4)

    def test_exact_loglik_uses_theta(self):
        model = LgssModel(demo_spec())
        data = Dataset(None, [0.1, 0.5, -0.3])
        assert model.exact_loglik(data, model.parameters({"R": 2.0})) != model.exact_loglik(data, model.parameters())


class TestWaterTankModel:
    """Test the cascaded water-tank model."""

    def test_empty_tanks_stay_empty(self):
        model = WaterTankModel()
        mean = model.transition_mean(np.zeros((1, 2)), np.array([0.0]), 1, model.parameters())
        np.testing.assert_array_equal(mean, np.zeros((1, 2)))

    def test_overflow_feeds_lower_tank(self):
        model = WaterTankModel()
        theta = model.parameters({"k1": 0.0, "k2": 0.0, "k6": 0.3})
        mean = model.transition_mean(np.array([[12.0, 0.0]]), np.array([0.0]), 1, theta)
        assert mean[0, 1] == pytest.approx(2.0 * 0.3)
        assert mean[0, 0] == pytest.approx(HEIGHT)

    def test_observation_uses_capped_level(self):
        model = WaterTankModel()
        assert model.observation_mean(np.array([[3.0, 14.0]]), np.zeros(1), 0, model.parameters())[0, 0] == HEIGHT
        assert WaterTankState(12.0, -1.0).capped == (HEIGHT, 0.0)

    def test_params_from_theta(self):
        model = WaterTankModel(structure="k135")
        params = WaterTankParams.from_theta(model.parameters({"k1": 0.05}))
        assert params.k1 == 0.05
        np.testing.assert_array_equal(params.k[[1, 3, 5]], [0.0, 0.0, 0.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_capped_levels_stay_in_tank(self, seed):
        model = WaterTankModel(initial_std=3.0)
        theta = model.parameters({"sigma_v2": 2.0})
        inputs = RandomStream(seed).uniform(0.0, 10.0, size=(300, 1))
        states, data = model.simulate(theta, 300, RandomStream(seed + 50), inputs=inputs)
        levels = capped(states)
        assert np.all((levels >= 0.0) & (levels <= HEIGHT))
        for row in states[::25]:
            upper, lower = WaterTankState(*row).capped
            assert 0.0 <= upper <= HEIGHT and 0.0 <= lower <= HEIGHT
        means = model.observation_mean(states, np.zeros(1), 0, theta)
        assert np.all((means >= 0.0) & (means <= HEIGHT))

    def test_initial_state_defaults_to_first_measurement(self):
        model = WaterTankModel()
        data = Dataset([[1.0], [1.0]], [4.2, 4.4])
        x = model.sample_initial(model.parameters(), 3, RandomStream(0), data=data)
        np.testing.assert_array_equal(x, np.tile([6.0, 4.2], (3, 1)))

    def test_derivatives_match_finite_differences(self):
        model = WaterTankModel()
        theta = model.parameters({"k1": 0.05, "k2": 0.01, "k3": 0.06, "k4": -0.005, "k5": 0.04, "k6": 0.25,
                                  "sigma_v2": 0.02, "sigma_e2": 0.03})
        x_prev = np.array([[10.5, 4.0]])
        x = np.array([[9.9, 4.3]])
        u, y = np.array([2.0]), np.array([4.1])
        g_tr, h_tr = model.transition_derivatives(x, x_prev, u, 1, theta, PARAM_NAMES)
        g_obs, h_obs = model.observation_derivatives(y, x, u, 1, theta, PARAM_NAMES)
        fd_g, fd_h = numeric_derivatives(
            lambda th: float(model.transition_logpdf(x, x_prev, u, 1, th)[0])
            + float(model.observation_logpdf(y, x, u, 1, th)[0]),
            theta, PARAM_NAMES, h=1e-6,
        )
        np.testing.assert_allclose(g_tr[0] + g_obs[0], fd_g, rtol=1e-4, atol=1e-3)
        np.testing.assert_allclose(h_tr[0] + h_obs[0], fd_h, rtol=1e-3, atol=1.0)

    def test_structure_pins_flow_constants(self):
        model = WaterTankModel(structure="k135")
        theta = model.parameters()
        assert theta["k2"] == 0.0 and theta["k4"] == 0.0 and theta["k6"] == 0.0
        assert model.default_free() == STRUCTURES["k135"] + ("sigma_v2", "sigma_e2")

    def test_unknown_structure(self):
        with pytest.raises(CapabilityError):
            WaterTankModel(structure="k246")

    def test_m_step_recovers_known_constants(self):
        """Noise-free trajectories let weighted least squares recover the flow constants."""
        model = WaterTankModel(structure="k135")
        truth = model.parameters({"k1": 0.05, "k3": 0.06, "k5": 0.04, "sigma_v2": 1e-8, "sigma_e2": 0.01})
        inputs = (3.0 + 2.0 * np.sin(np.arange(200) / 7.0)).reshape(-1, 1)
        states, data = model.simulate(truth, 200, RandomStream(3), inputs)
        theta = model.parameters(free=model.default_free())
        stats = model.complete_data_statistics(states[None], np.ones(1), data, theta)
        estimate = model.maximize_statistics(stats, theta)
        for name in ("k1", "k3", "k5"):
            assert estimate[name] == pytest.approx(truth[name], abs=1e-3)
        assert estimate["sigma_v2"] < 1e-6
        assert estimate["k2"] == 0.0

    def test_parameter_conditional_moves_free_parameters_only(self):
        model = WaterTankModel(structure="k135")
        truth = model.parameters({"k1": 0.05, "k3": 0.06, "k5": 0.04, "sigma_v2": 0.01, "sigma_e2": 0.01})
        inputs = np.full((50, 1), 3.0)
        states, data = model.simulate(truth, 50, RandomStream(4), inputs)
        theta = truth.with_free(model.default_free())
        draw = model.parameter_conditional(states, data, theta, model.default_prior(), RandomStream(5))
        assert draw["k2"] == 0.0
        assert draw["k1"] != theta["k1"]
        assert draw["sigma_v2"] > 0.0


class TestDengueModel:
    """Test the counted-compartment epidemic model."""

    def test_capabilities(self):
        model = DengueModel()
        assert model.supports_feature("parameter_conditional")
        assert not model.supports_feature("transition_density")
        assert not model.supports_feature("initial_density")

    def test_all_exposed_become_infectious(self):
        model = DengueModel()
        theta = model.parameters({"delta_h": 1.0})
        x = model.sample_initial(theta, 20, RandomStream(0))
        nxt = model.sample_transition(x, np.array([0.0]), 1, theta, RandomStream(1))
        np.testing.assert_array_equal(nxt[:, NEW_IH], x[:, EH])

    def test_no_infectious_mosquitoes_no_bites(self):
        model = DengueModel()
        theta = model.parameters()
        x = model.sample_initial(theta, 20, RandomStream(0))
        x[:, IM] = 0
        nxt = model.sample_transition(x, np.array([0.0]), 1, theta, RandomStream(1))
        assert np.all(nxt[:, TAU_H] == 0)

    def test_population_conserved(self):
        model = DengueModel()
        theta = model.parameters()
        states, _ = model.simulate(theta, 40, RandomStream(2))
        humans = states[:, SH] + states[:, EH] + states[:, IH] + states[:, RH]
        assert np.all(humans == model.population)
        rows = [SeirState.from_array(row) for row in states]
        assert {row.humans for row in rows} == {model.population}
        assert len({row.mosquitoes for row in rows}) == 1
        np.testing.assert_array_equal(rows[-1].to_array(), states[-1])

    def test_probabilities_checked(self):
        values = dict(DengueModel().default_parameters(), rho=1.5)
        with pytest.raises(InputError):
            SeirParams(**values)
        assert SeirParams.from_theta(DengueModel().parameters()).gamma_m == 0.0

    def test_full_reporting_observes_accumulator_exactly(self):
        model = DengueModel()
        theta = model.parameters({"rho": 1.0})
        x = model.sample_initial(theta, 8, RandomStream(4))
        x[:, Z] = np.arange(8) * 3
        for i in range(8):
            logp = model.observation_logpdf(np.array([float(x[i, Z])]), x, np.zeros(1), 0, theta)
            assert logp[i] == 0.0
            assert np.all(np.isneginf(np.delete(logp, i)))

    def test_initial_accumulator_is_configurable(self):
        theta = DengueModel().parameters()
        counted = DengueModel().sample_initial(theta, 6, RandomStream(5))
        np.testing.assert_array_equal(counted[:, Z], counted[:, IH])
        fresh = DengueModel(count_initial_infectious=False).sample_initial(theta, 6, RandomStream(5))
        np.testing.assert_array_equal(fresh[:, Z], 0)
        np.testing.assert_array_equal(fresh[:, IH], counted[:, IH])

    def test_reset_clears_accumulator(self):
        model = DengueModel()
        theta = model.parameters()
        x = model.sample_initial(theta, 10, RandomStream(0))
        carried = model.sample_transition(x, np.array([0.0]), 1, theta, RandomStream(1))
        reset = model.sample_transition(x, np.array([1.0]), 1, theta, RandomStream(1))
        np.testing.assert_array_equal(carried[:, Z], x[:, Z] + carried[:, NEW_IH])
        np.testing.assert_array_equal(reset[:, Z], reset[:, NEW_IH])

    def test_missing_reset_input(self):
        model = DengueModel()
        theta = model.parameters()
        x = model.sample_initial(theta, 2, RandomStream(0))
        with pytest.raises(InputError):
            model.sample_transition(x, np.zeros(0), 1, theta, RandomStream(1))

    def test_simulated_reports_follow_schedule(self):
        model = DengueModel()
        states, data = model.simulate(model.parameters(), 21, RandomStream(3))
        observed = np.flatnonzero(data.observed_mask)
        assert observed.tolist() == [0, 7, 14, 20]
        assert np.all(data.observations[observed, 0] <= states[observed, Z])

    def test_default_prior_pins_mosquito_recovery(self):
        model = DengueModel()
        assert "gamma_m" not in model.default_free()
        assert "gamma_m" not in model.default_prior().free_names()

    def test_conditional_is_beta_binomial(self):
        model = DengueModel()
        theta = model.parameters(free=("delta_h", "rho"))
        states, data = model.simulate(model.parameters(), 28, RandomStream(6))
        counts = model.beta_binomial_counts(states, data)
        successes, trials = counts["delta_h"]
        assert successes <= trials
        draw = model.parameter_conditional(states, data, theta, model.default_prior(), RandomStream(7))
        assert 0.0 < draw["delta_h"] < 1.0
        assert draw["gamma_h"] == theta["gamma_h"]

    def test_bad_population(self):
        with pytest.raises(InputError):
            DengueModel(population=0)

    def test_weekly_reset_inputs(self):
        flags = weekly_reset_inputs(15)
        assert flags.shape == (15, 1)
        assert flags[:, 0].tolist()[:9] == [0, 1, 0, 0, 0, 0, 0, 0, 1]

    def test_weekly_reset_inputs_need_steps(self):
        with pytest.raises(InputError):
            weekly_reset_inputs(0)


class TestFiniteHmm:
    """Test the finite-state oracle model."""

    def test_enumeration_matches_forward(self):
        hmm = toy_hmm(num_states=3, num_symbols=2, seed=1)
        data = Dataset(None, [0.0, 1.0, np.nan, 1.0, 0.0])
        _, log_joint_values = hmm.enumerate_trajectories(data)
        assert float(logsumexp(log_joint_values)) == pytest.approx(hmm.exact_loglik(data), abs=1e-12)

    def test_log_joint_matches_enumeration(self):
        hmm = toy_hmm(num_states=2, num_symbols=2, seed=2)
        data = Dataset(None, [1.0, 0.0, 1.0])
        trajectories, values = hmm.enumerate_trajectories(data)
        for traj, value in zip(trajectories[:4], values[:4]):
            assert log_joint(hmm, traj, data, hmm.parameters()) == pytest.approx(value, abs=1e-12)

    def test_smoothing_distribution_sums_to_one(self):
        hmm = toy_hmm(num_states=2, num_symbols=2, seed=3)
        dist = hmm.smoothing_distribution(Dataset(None, [0.0, 1.0, 1.0]))
        assert sum(dist.values()) == pytest.approx(1.0)
        assert len(dist) == 8

    def test_enumeration_limits(self):
        hmm = toy_hmm(num_states=2)
        with pytest.raises(InputError):
            hmm.enumerate_trajectories(Dataset(None, np.zeros(9)))

    def test_invalid_tables(self):
        with pytest.raises(InputError):
            FiniteHmm([0.5, 0.5], [[0.5, 0.6], [0.5, 0.5]], [[1.0], [1.0]])
        with pytest.raises(InputError):
            toy_hmm(num_states=6)


class TestModelRegistry:
    """Test model construction and capability checks."""

    def test_build_known_models(self):
        registry = ModelRegistry()
        assert isinstance(registry.build("watertank", structure="k1356"), WaterTankModel)
        assert isinstance(registry.build("dengue"), DengueModel)
        assert isinstance(registry.build("lgss-demo"), LgssModel)
        assert isinstance(registry.build("hmm", num_states=2), FiniteHmm)

    def test_build_lgss_from_matrices(self):
        registry = ModelRegistry()
        model = registry.build("lgss", A=[[0.5]], B=[[0.0]], C=[[1.0]], D=[[0.0]], Q=[[1.0]], R=[[1.0]],
                               mu1=[0.0], P1=[[1.0]])
        assert model.scalar

    def test_lgss_needs_every_matrix(self):
        with pytest.raises(ConfigError):
            ModelRegistry().build("lgss", A=[[1.0]])

    def test_unknown_model(self):
        with pytest.raises(ConfigError):
            ModelRegistry().build("pendulum")

    def test_bad_options(self):
        with pytest.raises(ConfigError):
            ModelRegistry().build("dengue", population="many")

    def test_pgas_on_dengue_is_refused(self):
        registry = ModelRegistry()
        with pytest.raises(CapabilityError, match="transition density unavailable"):
            registry.check_algorithm(registry.build("dengue"), "pgas")
        registry.check_algorithm(registry.build("dengue"), "pg")

    def test_pem_needs_linear_gaussian_model(self):
        registry = ModelRegistry()
        with pytest.raises(CapabilityError):
            registry.check_algorithm(registry.build("watertank"), "pem")
        registry.check_algorithm(registry.build("lgss-demo"), "pem")

    def test_unknown_algorithm(self):
        registry = ModelRegistry()
        with pytest.raises(ConfigError):
            registry.check_algorithm(registry.build("lgss-demo"), "vi")

    def test_supported_algorithms(self):
        registry = ModelRegistry()
        assert registry.supported_algorithms(registry.build("dengue")) == ["smc", "pmmh", "pg"]
        assert "pgas" in registry.supported_algorithms(registry.build("watertank"))

    def test_capability_table(self):
        table = ModelRegistry().get_capabilities()
        assert set(table) == {"lgss-demo", "watertank", "dengue", "hmm"}
        assert table["dengue"]["parameter_conditional"]
        assert not table["hmm"]["linearization"]
        assert ModelRegistry().has_feature("exact_likelihood")
        assert not ModelRegistry().has_feature("teleportation")

    def test_prior_for_conditional_is_product(self):
        prior = WaterTankModel(structure="k135").default_prior()
        assert isinstance(prior, Prior)
        assert set(prior.free_names()) == {"k1", "k3", "k5", "sigma_v2", "sigma_e2"}
