"""
Statistical acceptance checks.

These runs take seconds to minutes each and are deselected by default;
run them with ``pytest -m slow``. Benchmark data are used when the
environment points at them:

    PARTICLE_SYSID_WATERTANK_DATA   CSV with uEst,yEst,uVal,yVal columns
    PARTICLE_SYSID_DENGUE_DATA      CSV with date,y weekly reports
"""

import math
import os
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from particle_sysid.api import run_experiment, validation_error
from particle_sysid.config import EmSettings, ExperimentConfig, McmcSettings, SmcSettings
from particle_sysid.core import Dataset, InverseGamma, Prior, RandomStream
from particle_sysid.datasets import load_dataset, simulate_dataset
from particle_sysid.estimators import estimate_loglik, finite_difference_gradient, score_and_hessian
from particle_sysid.gaussian import kalman_filter
from particle_sysid.learn_bayes import RandomWalkProposal, exact_likelihood_mh, particle_gibbs, pmmh
from particle_sysid.learn_ml import gradient_search, pem_lgss, psaem
from particle_sysid.models import ChainTrace
from particle_sysid.smc import csmc_run, smc_run, twisted_smc_run
from particle_sysid.systems.dengue import DengueModel
from particle_sysid.systems.hmm import FiniteHmm
from particle_sysid.systems.lgss import LgssModel, demo_spec
from particle_sysid.systems.watertank import PSAEM_ESTIMATE, WaterTankModel

pytestmark = pytest.mark.slow

WATERTANK_DATA = os.getenv("PARTICLE_SYSID_WATERTANK_DATA")
DENGUE_DATA = os.getenv("PARTICLE_SYSID_DENGUE_DATA")


def lgss_problem(T, seed=0, free=()):
    model = LgssModel(demo_spec())
    theta = model.parameters(free=free)
    _, data = model.simulate(theta, T, RandomStream(seed))
    return model, theta, data


def thinned(trace: ChainTrace, name: str, burn_in: int, step: int) -> np.ndarray:
    return trace.samples(name, burn_in)[::step]


class TestLikelihoodEstimates:
    """Unbiasedness, filtering accuracy and twisting."""

    def test_likelihood_is_unbiased(self):
        model, theta, data = lgss_problem(T=25, seed=1)
        exact = model.exact_loglik(data, theta)
        root = RandomStream(11)
        ratios = np.exp([estimate_loglik(model, data, theta, 100, root.split(r)) - exact for r in range(500)])
        se = ratios.std(ddof=1) / math.sqrt(ratios.size)
        assert abs(ratios.mean() - 1.0) < 3 * se

    def test_filter_means_track_kalman(self):
        model, theta, data = lgss_problem(T=50, seed=2)
        ensemble = smc_run(model, data, theta, 5000, RandomStream(3))
        beliefs, _ = kalman_filter(model.spec_for(theta), data)
        exact = np.array([b.mean[0] for b in beliefs])
        rmse = math.sqrt(np.mean((ensemble.filter_means()[:, 0] - exact) ** 2))
        assert rmse < 0.1

    @pytest.mark.parametrize("N", [5, 50])
    def test_twisted_linear_model_has_zero_variance(self, N):
        model, theta, data = lgss_problem(T=40, seed=4)
        exact = model.exact_loglik(data, theta)
        for r in range(5):
            ensemble = twisted_smc_run(model, data, theta, N, RandomStream(r), matched_proposal=True)
            assert abs(ensemble.logZ - exact) < 1e-6

    def test_twisting_reduces_variance_on_tanks(self):
        model = WaterTankModel()
        theta = model.parameters(PSAEM_ESTIMATE)
        if WATERTANK_DATA:
            data = load_dataset(Path(WATERTANK_DATA), "watertank", series="est")
        else:
            data = simulate_dataset(model, theta, 300, RandomStream(5))
        root = RandomStream(6)
        twisted = [twisted_smc_run(model, data, theta, 10, root.split(r), matched_proposal=True).logZ
                   for r in range(100)]
        bootstrap = [estimate_loglik(model, data, theta, 100, root.split(r)) for r in range(100)]
        assert np.var(twisted, ddof=1) <= np.var(bootstrap, ddof=1)


class TestScore:
    """Particle score against finite differences of the exact likelihood."""

    def test_gradient_in_q(self):
        model, _, data = lgss_problem(T=50, seed=7)
        theta = model.parameters({"Q": 1.0}, free=("Q",))
        exact = finite_difference_gradient(lambda th: model.exact_loglik(data, th), theta)[0]
        root = RandomStream(8)
        grads = [score_and_hessian(model, data, theta, 2000, root.split(s))[0][0] for s in range(20)]
        assert abs(np.mean(grads) - exact) < 0.05 * abs(exact)


class TestWaterTankIdentification:
    """Identification of the cascaded tanks."""

    @pytest.mark.skipif(not WATERTANK_DATA, reason="benchmark data not configured")
    def test_benchmark(self):
        est = load_dataset(Path(WATERTANK_DATA), "watertank", series="est")
        val = load_dataset(Path(WATERTANK_DATA), "watertank", series="val")
        model = WaterTankModel()
        theta0 = model.parameters(free=model.default_free())
        grad = gradient_search(model, est, theta0, 50, RandomStream(1), max_iters=100)
        assert validation_error(model, grad.theta, val) <= 0.4
        em = psaem(model, est, theta0, 50, 50, RandomStream(2))
        assert validation_error(model, em.theta, val) <= 0.4

        scores = {}
        for structure in ("k135", "k1356", "full"):
            reduced = WaterTankModel(structure=structure)
            state = psaem(reduced, est, reduced.parameters(free=reduced.default_free()), 50, 50, RandomStream(3))
            scores[structure] = validation_error(reduced, state.theta, val)
        assert scores["full"] < scores["k1356"] < scores["k135"]

    def test_synthetic_self_identification(self):
        model = WaterTankModel()
        truth = model.parameters(PSAEM_ESTIMATE)
        est = simulate_dataset(model, truth, 400, RandomStream(9))
        val = simulate_dataset(model, truth, 400, RandomStream(10))
        floor = validation_error(model, truth, val)
        theta0 = model.parameters(free=model.default_free())
        em = psaem(model, est, theta0, 50, 50, RandomStream(11))
        assert validation_error(model, em.theta, val) <= 2 * floor
        grad = gradient_search(model, est, theta0, 50, RandomStream(12), max_iters=100)
        assert validation_error(model, grad.theta, val) <= 2 * floor


class TestEm:
    """Exact EM on a linear-Gaussian model."""

    def test_fifty_iterations_never_decrease(self):
        model, _, data = lgss_problem(T=100, seed=13)
        theta0 = model.parameters({"A": 0.2, "Q": 3.0, "R": 0.1}, free=("A", "C", "Q", "R"))
        state = pem_lgss(model, data, theta0, iters=50)
        logz = np.array([record.logz for record in state.trace.records])
        assert np.all(np.diff(logz) >= -1e-9)


class TestBayesian:
    """PMMH and particle Gibbs against exact-likelihood MH."""

    def test_pmmh_matches_exact_mh(self):
        model, _, data = lgss_problem(T=50, seed=14)
        prior = Prior({"Q": InverseGamma(1.0, 0.5)})
        theta0 = model.parameters(free=("Q",))
        proposal = RandomWalkProposal.isotropic(1, 0.4)
        reference = exact_likelihood_mh(model, data, prior, proposal, 20_000, RandomStream(15), theta0)
        chain = pmmh(model, data, prior, proposal, 100, 20_000, RandomStream(16), theta0)
        result = stats.ks_2samp(thinned(reference, "Q", 2000, 20), thinned(chain, "Q", 2000, 20))
        assert result.pvalue > 0.01

    def test_particle_gibbs_matches_exact_mh(self):
        model, _, data = lgss_problem(T=150, seed=17)
        prior = Prior({"Q": InverseGamma(1.0, 0.5), "R": InverseGamma(1.0, 0.5)})
        theta0 = model.parameters(free=("Q", "R"))
        proposal = RandomWalkProposal.isotropic(2, 0.2)
        reference = exact_likelihood_mh(model, data, prior, proposal, 20_000, RandomStream(18), theta0)
        chain = particle_gibbs(model, data, prior, 100, 10_000, RandomStream(19), theta0=theta0)
        for name in ("Q", "R"):
            result = stats.ks_2samp(thinned(reference, name, 2000, 40), thinned(chain, name, 1000, 20))
            assert result.pvalue > 0.01, name

    def test_ancestor_sampling_mixes_faster(self):
        model, _, data = lgss_problem(T=150, seed=20)
        prior = Prior({"Q": InverseGamma(1.0, 0.5), "R": InverseGamma(1.0, 0.5)})
        theta0 = model.parameters(free=("Q", "R"))
        wins = 0
        for seed in range(5):
            pg = particle_gibbs(model, data, prior, 20, 10_000, RandomStream(seed), theta0=theta0)
            pgas = particle_gibbs(model, data, prior, 20, 10_000, RandomStream(seed), ancestor_sampling=True,
                                  theta0=theta0)
            wins += pgas.summary(1000)["Q"]["iact"] < pg.summary(1000)["Q"]["iact"]
        assert wins >= 3


class TestConditionalSmcInvariance:
    """The conditional-SMC kernel leaves the smoothing law invariant."""

    @pytest.mark.parametrize("ancestor_sampling", [False, True])
    def test_hmm_trajectory_law(self, ancestor_sampling):
        hmm = FiniteHmm([0.6, 0.4], [[0.8, 0.2], [0.3, 0.7]], [[0.9, 0.1], [0.2, 0.8]])
        data = Dataset(None, [0.0, 1.0, 1.0])
        theta = hmm.parameters()
        exact = hmm.smoothing_distribution(data)
        paths = sorted(exact)
        probs = np.array([exact[p] for p in paths])

        root = RandomStream(21)
        start = paths[int(root.split(0).choice(len(paths), p=probs))]
        reference = np.array(start, dtype=np.int64).reshape(-1, 1)
        counts = Counter()
        draws = 100_000
        for i in range(draws):
            reference = csmc_run(hmm, data, theta, reference, 3, root.split(i + 1),
                                 ancestor_sampling=ancestor_sampling)
            counts[tuple(int(s) for s in reference[:, 0])] += 1
        observed = np.array([counts[p] for p in paths])
        assert observed.sum() == draws
        result = stats.chisquare(observed, probs * draws)
        assert result.pvalue > 0.01


class TestDengue:
    """Dengue posterior on the Yap reports."""

    @pytest.mark.skipif(not DENGUE_DATA, reason="dengue reports not configured")
    def test_reporting_probability(self):
        data = load_dataset(Path(DENGUE_DATA), "dengue")
        model = DengueModel()
        prior = model.default_prior()
        chain = particle_gibbs(model, data, prior, 256, 1000, RandomStream(22))
        rho = chain.samples("rho", chain.default_burn_in())
        assert 0.2 <= np.median(rho) <= 0.5
        assert np.mean((rho >= 0.1) & (rho <= 0.6)) >= 0.6


class TestDeterminism:
    """Same seed, same bytes."""

    @pytest.mark.parametrize(
        "algorithm,changes",
        [
            ("pmmh", {"mcmc": McmcSettings(iterations=200)}),
            ("pgas", {"mcmc": McmcSettings(iterations=100)}),
            ("psaem", {"em": EmSettings(iters=20)}),
            ("gradsearch", {}),
        ],
    )
    def test_trace_files_identical(self, tmp_path, algorithm, changes):
        config = ExperimentConfig(algorithm=algorithm, synthetic_length=50, smc=SmcSettings(particles=30),
                                  seed=23, output_dir=str(tmp_path), force=True, **changes)
        run_dir = tmp_path / config.run_name
        files = []
        for _ in range(2):
            run_experiment(config, command=[])
            files.append({path.name: path.read_bytes() for path in sorted(run_dir.iterdir())
                          if path.name != "timing.json"})
        assert files[0] == files[1]
