"""
particle-sysid - sequential Monte Carlo identification of nonlinear state-space models.

Particle filters (bootstrap, twisted, conditional) and the learners built on
them: gradient/Newton search, exact EM and PSAEM for maximum likelihood,
Metropolis-Hastings, PMMH and particle Gibbs (with ancestor sampling) for
Bayesian inference. Models: linear-Gaussian, cascaded water tanks, a coupled
human/mosquito SEIR model for dengue, and a small discrete HMM.

Example:
    Estimate a log-likelihood and run PMMH::

        from particle_sysid import RandomStream, estimate_loglik, pmmh, RandomWalkProposal
        from particle_sysid.systems.lgss import LgssModel, demo_spec

        model = LgssModel(demo_spec())
        theta = model.parameters(free=["Q"])
        _, data = model.simulate(theta, 100, RandomStream(1))
        logz = estimate_loglik(model, data, theta, 100, RandomStream(2))

    Use the CLI::

        $ particle-sysid run configs/lgss_pmmh.yaml --seed 3
"""

__version__ = "0.1.0"
__author__ = "flight505"
__license__ = "MIT"

from .api import run_experiment, summarize_run
from .config import ExperimentConfig
from .core import Dataset, ParameterVector, Prior, RandomStream, log_joint, mode_matched_beta
from .datasets import load_dataset, validate_dataset
from .errors import (
    CapabilityError,
    ConfigError,
    DatasetError,
    DegeneracyError,
    DomainError,
    InputError,
    NumericalError,
    SysIdError,
)
from .estimators import e_rms, estimate_loglik, integrated_autocorrelation_time, score_and_hessian
from .learn_bayes import RandomWalkProposal, exact_likelihood_mh, particle_gibbs, pmmh
from .learn_ml import gradient_search, pem_lgss, psaem
from .models import ChainTrace, RunResult
from .smc import ParticleEnsemble, bootstrap_pf, csmc_run, smc_run, twisted_smc_run

__all__ = [
    "run_experiment",
    "summarize_run",
    "ExperimentConfig",
    "Dataset",
    "ParameterVector",
    "Prior",
    "RandomStream",
    "log_joint",
    "mode_matched_beta",
    "load_dataset",
    "validate_dataset",
    "SysIdError",
    "InputError",
    "DomainError",
    "DegeneracyError",
    "CapabilityError",
    "NumericalError",
    "ConfigError",
    "DatasetError",
    "estimate_loglik",
    "score_and_hessian",
    "e_rms",
    "integrated_autocorrelation_time",
    "RandomWalkProposal",
    "exact_likelihood_mh",
    "pmmh",
    "particle_gibbs",
    "gradient_search",
    "pem_lgss",
    "psaem",
    "ChainTrace",
    "RunResult",
    "ParticleEnsemble",
    "smc_run",
    "bootstrap_pf",
    "twisted_smc_run",
    "csmc_run",
]
