"""
Programmatic experiment runner.

``run_experiment`` turns an ExperimentConfig into a run directory:

    <output_root>/<run_name>/
        manifest.json      full config, seed, package version, command line, dataset digests
        summary.json       final theta or posterior summaries, logZ, e_RMS (byte-identical across reruns)
        timing.json        wall time
        trace.csv          learner trace (gradsearch, pem, psaem)
        chain<k>.jsonl     chain traces (mh, pmmh, pg, pgas)
        smc_runs.csv       logZ per independent filter run (smc, twisted-smc)
        diagnostics.jsonl  per-step SMC diagnostics when enabled

Random streams: the algorithm uses ``RandomStream(seed)``; chain k of a
multi-chain run uses stream id k; synthetic data use stream id DATA_STREAM_ID.
"""

import hashlib
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from .config import ExperimentConfig
from .core import Dataset, ParameterVector, Prior, RandomStream
from .datasets import load_dataset, simulate_dataset
from .errors import (
    CapabilityError,
    ConfigError,
    DatasetError,
    DegeneracyError,
    DomainError,
    InputError,
    NumericalError,
    OutputExistsError,
    SysIdError,
)
from .estimators import e_rms, simulate_output
from .learn_bayes import RandomWalkProposal, exact_likelihood_mh, particle_gibbs, pmmh, pool_chains
from .learn_ml import default_step_sizes, gradient_search, pem_lgss, psaem
from .models import ChainTrace, LearnerTrace, RunResult
from .smc import smc_run, twisted_smc_run
from .systems.base import StateSpaceModel
from .systems.registry import ModelRegistry
from .utils import (
    MANIFEST_FILE,
    SUMMARY_FILE,
    TIMING_FILE,
    package_version,
    prepare_run_directory,
    read_json,
    scan_run_directory,
    write_json,
)

logger = logging.getLogger(__name__)

DATA_STREAM_ID = 1_000_000

# Exit codes reported by the CLI
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_DATASET = 4
EXIT_EXISTS = 5


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the documented exit code."""
    if isinstance(error, OutputExistsError):
        return EXIT_EXISTS
    if isinstance(error, DatasetError):
        return EXIT_DATASET
    if isinstance(error, (DegeneracyError, NumericalError)):
        return EXIT_RUNTIME
    if isinstance(error, (ConfigError, CapabilityError, InputError, DomainError)):
        return EXIT_CONFIG
    return EXIT_UNEXPECTED


@dataclass
class Experiment:
    """Everything a dispatcher needs, resolved from the config."""
    config: ExperimentConfig
    model: StateSpaceModel
    data: Dataset
    validation: Optional[Dataset]
    theta0: ParameterVector
    prior: Optional[Prior]
    run_dir: Path

    @property
    def smc_options(self) -> Dict[str, Any]:
        return self.config.smc.smc_options()


# ---------------------------------------------------------------------------
# Setup
# ---------------------------------------------------------------------------

def load_environment(cwd: Optional[Path] = None) -> None:
    """Load ``.env`` from the working directory (output root and similar settings)."""
    env_file = Path(cwd or Path.cwd()) / ".env"
    if env_file.exists():
        load_dotenv(dotenv_path=env_file, override=False)


def build_model(config: ExperimentConfig, registry: Optional[ModelRegistry] = None) -> StateSpaceModel:
    """
    Build the configured model and check it against the algorithm.

    Raises:
        ConfigError: unknown model or options
        CapabilityError: the model lacks a feature the algorithm needs
    """
    registry = registry or ModelRegistry()
    model = registry.build(config.model, **config.model_options)
    registry.check_algorithm(model, config.algorithm)
    if config.smc.twisted or config.algorithm == "twisted-smc":
        model.require("linearization", "twisted smc")
    return model


def resolve_prior(model: StateSpaceModel, config: ExperimentConfig) -> Optional[Prior]:
    prior = Prior.from_dict(config.prior) if config.prior else model.default_prior()
    if prior is None and config.is_bayesian:
        raise ConfigError("Bayesian algorithms need a prior", model=config.model, algorithm=config.algorithm)
    return prior


def resolve_free(model: StateSpaceModel, config: ExperimentConfig, prior: Optional[Prior]) -> List[str]:
    """Configured free parameters, else the model's defaults restricted to the prior's non-degenerate names."""
    if config.free is not None:
        unknown = [name for name in config.free if name not in model.param_names]
        if unknown and model.param_names:
            raise ConfigError("Free parameters not in the model", unknown=unknown, known=list(model.param_names))
        return [name for name in config.free if name in model.param_names]
    free = list(model.default_free())
    if prior is not None:
        free = [name for name in free if name in prior.free_names()]
    return free


def _synthetic_data(model: StateSpaceModel, config: ExperimentConfig) -> Dataset:
    truth = dict(config.params)
    truth.update(config.synthetic_params)
    theta = model.parameters(truth)
    rng = RandomStream(config.seed, DATA_STREAM_ID)
    return simulate_dataset(model, theta, config.synthetic_length, rng.split(0))


def load_data(model: StateSpaceModel, config: ExperimentConfig):
    """
    Training and validation data.

    Without a dataset file the model simulates one. A synthetic validation
    series is drawn for models with mean maps, so e_RMS is always reported
    for them.

    Returns:
        (data, validation or None)
    """
    if config.dataset:
        data = load_dataset(Path(config.dataset), config.dataset_format, series="est")
    else:
        data = _synthetic_data(model, config)
    validation = None
    if config.validation_dataset:
        validation = load_dataset(Path(config.validation_dataset), config.dataset_format, series="val")
    elif not config.dataset and model.supports_feature("linearization") and model.param_names:
        truth = dict(config.params)
        truth.update(config.synthetic_params)
        rng = RandomStream(config.seed, DATA_STREAM_ID)
        validation = simulate_dataset(model, model.parameters(truth), config.synthetic_length, rng.split(1))
    if data.obs_dim != model.obs_dim:
        raise DatasetError("Observation dimension does not match the model", expected=model.obs_dim,
                           got=data.obs_dim)
    return data, validation


def validation_error(model: StateSpaceModel, theta: ParameterVector, validation: Optional[Dataset]) -> Optional[float]:
    """e_RMS of the noise-free rollout on the validation inputs; None when not applicable."""
    if validation is None or not model.supports_feature("linearization"):
        return None
    x1 = model.initial_moments(theta, data=validation)[0]
    y_hat = simulate_output(model, validation.inputs, theta, x1)
    mask = validation.observed_mask
    return e_rms(validation.observations[mask], y_hat[mask])


def _digest(path: Optional[str]) -> Optional[str]:
    if not path or not Path(path).exists():
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Dispatchers
# ---------------------------------------------------------------------------

def _run_filter(exp: Experiment) -> RunResult:
    cfg = exp.config
    rng = RandomStream(cfg.seed)
    twisted = cfg.algorithm == "twisted-smc" or cfg.smc.twisted
    options = {"resampling": cfg.smc.resampling, "ess_threshold": cfg.smc.ess_threshold}
    rows = []
    first = None
    for r in range(cfg.smc.runs):
        diagnostics = exp.run_dir / "diagnostics.jsonl" if cfg.smc.diagnostics and r == 0 else None
        if twisted:
            ensemble = twisted_smc_run(exp.model, exp.data, exp.theta0, cfg.smc.particles, rng.split(r),
                                       matched_proposal=cfg.smc.matched_proposal, diagnostics_path=diagnostics,
                                       **options)
        else:
            ensemble = smc_run(exp.model, exp.data, exp.theta0, cfg.smc.particles, rng.split(r),
                               diagnostics_path=diagnostics, **options)
        if first is None:
            first = ensemble
        rows.append({"run": r, "logZ": ensemble.logZ, "min_ess": float(ensemble.ess.min()),
                     "resample_steps": int(ensemble.resampled.sum())})
    frame = pd.DataFrame(rows)
    frame.to_csv(exp.run_dir / "smc_runs.csv", index=False, float_format="%.10g")
    means = first.filter_means()
    columns = exp.model.state_labels or [f"x{j}" for j in range(means.shape[1])]
    pd.DataFrame(means, columns=list(columns)).to_csv(
        exp.run_dir / "filter_means.csv", index=False, float_format="%.10g")

    metrics: Dict[str, Any] = {"logZ": float(frame["logZ"].iloc[0]), "runs": cfg.smc.runs,
                               "min_ess": float(frame["min_ess"].min())}
    if cfg.smc.runs > 1:
        metrics["logZ_mean"] = float(frame["logZ"].mean())
        metrics["logZ_var"] = float(frame["logZ"].var(ddof=1))
    if exp.model.supports_feature("exact_likelihood"):
        metrics["exact_loglik"] = exp.model.exact_loglik(exp.data, exp.theta0)
    artifacts = ["smc_runs.csv", "filter_means.csv"] + (["diagnostics.jsonl"] if cfg.smc.diagnostics else [])
    return RunResult(theta=exp.theta0.to_dict(), metrics=metrics, artifacts=artifacts)


def _learner_result(exp: Experiment, theta: ParameterVector, trace: LearnerTrace, **extra: Any) -> RunResult:
    trace.to_csv(exp.run_dir / "trace.csv")
    metrics: Dict[str, Any] = {"iterations": len(trace) - 1, "logZ": trace[-1].logz}
    metrics.update(extra)
    metrics["e_rms"] = validation_error(exp.model, theta, exp.validation)
    return RunResult(theta=theta.to_dict(), metrics=metrics, artifacts=["trace.csv"])


def _run_gradsearch(exp: Experiment) -> RunResult:
    cfg = exp.config
    state = gradient_search(exp.model, exp.data, exp.theta0, cfg.smc.particles, RandomStream(cfg.seed),
                            **asdict(cfg.search), **exp.smc_options)
    accepted = sum(1 for record in state.trace.records[1:] if record.accepted)
    return _learner_result(exp, state.theta, state.trace, accepted_steps=accepted, stopped=state.stopped)


def _run_pem(exp: Experiment) -> RunResult:
    cfg = exp.config
    state = pem_lgss(exp.model, exp.data, exp.theta0, iters=cfg.em.iters, free=cfg.free)
    result = _learner_result(exp, state.theta, state.trace)
    if state.statistics is not None:
        result.metrics["matrices"] = {name: np.asarray(m).tolist() for name, m in state.statistics.items()}
    return result


def _run_psaem(exp: Experiment) -> RunResult:
    cfg = exp.config
    exponent = cfg.em.gamma_exponent
    step_sizes = cfg.em.step_sizes or (lambda k: default_step_sizes(k, exponent))
    state = psaem(exp.model, exp.data, exp.theta0, cfg.smc.particles, cfg.em.iters, RandomStream(cfg.seed),
                  step_sizes=step_sizes, prune_below=cfg.em.prune_below,
                  loglik_particles=cfg.em.loglik_particles, m_step_maxiter=cfg.em.m_step_maxiter,
                  **exp.smc_options)
    failed = sum(1 for record in state.trace.records[1:] if not record.accepted)
    return _learner_result(exp, state.theta, state.trace, failed_m_steps=failed)


def make_proposal(exp: Experiment) -> RandomWalkProposal:
    mcmc = exp.config.mcmc
    dim = len(exp.theta0.free)
    if mcmc.proposal_cov is not None:
        cov = np.asarray(mcmc.proposal_cov, dtype=float)
    else:
        cov = mcmc.proposal_scale ** 2 * np.eye(dim)
    if cov.shape != (dim, dim):
        raise ConfigError("Proposal covariance does not match the free parameters", shape=list(cov.shape),
                          free=list(exp.theta0.free))
    return RandomWalkProposal(cov, adapt=mcmc.adapt, adapt_interval=mcmc.adapt_interval)


def _run_chain(exp: Experiment, rng: RandomStream) -> ChainTrace:
    cfg = exp.config
    mcmc = cfg.mcmc
    if cfg.algorithm == "mh":
        return exact_likelihood_mh(exp.model, exp.data, exp.prior, make_proposal(exp), mcmc.iterations, rng,
                                   exp.theta0, mcmc.burn_in)
    if cfg.algorithm == "pmmh":
        return pmmh(exp.model, exp.data, exp.prior, make_proposal(exp), cfg.smc.particles, mcmc.iterations, rng,
                    exp.theta0, mcmc.burn_in, **exp.smc_options)
    return particle_gibbs(exp.model, exp.data, exp.prior, cfg.smc.particles, mcmc.iterations, rng,
                          ancestor_sampling=cfg.algorithm == "pgas", theta0=exp.theta0,
                          keep_trajectories=mcmc.keep_trajectories)


def run_chains(exp: Experiment) -> List[ChainTrace]:
    """
    Run ``config.chains`` independent chains; chain k uses stream id k.

    Chains run on a thread pool; the result list is ordered by chain id.
    """
    cfg = exp.config
    base = RandomStream(cfg.seed)
    if cfg.chains == 1:
        return [_run_chain(exp, base)]
    traces: List[Optional[ChainTrace]] = [None] * cfg.chains
    workers = min(cfg.chains, os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(_run_chain, exp, base.with_stream_id(k)): k for k in range(cfg.chains)}
        for future in as_completed(futures):
            k = futures[future]
            traces[k] = future.result()
            logger.info("Chain %d finished: acceptance %.3f", k, traces[k].acceptance_rate)
    return traces


def _run_bayes(exp: Experiment) -> RunResult:
    cfg = exp.config
    if not exp.theta0.free:
        raise ConfigError("No free parameters to sample", model=cfg.model, algorithm=cfg.algorithm)
    traces = run_chains(exp)
    artifacts = []
    per_chain = []
    for k, trace in enumerate(traces):
        name = f"chain{k}.jsonl"
        trace.seed = cfg.seed
        trace.config.update({"chain": k, "stream_id": k})
        trace.to_jsonl(exp.run_dir / name)
        artifacts.append(name)
        if trace.trajectories:
            traj_name = f"trajectories_chain{k}.npy"
            np.save(exp.run_dir / traj_name, np.stack(trace.trajectories))
            artifacts.append(traj_name)
        per_chain.append({"chain": k, "acceptance_rate": trace.acceptance_rate})
    pooled = pool_chains(traces, cfg.mcmc.burn_in)
    posterior = pooled.summary(burn_in=0)
    theta = exp.theta0.replace(**{name: stats["mean"] for name, stats in posterior.items()})
    metrics: Dict[str, Any] = {
        "samples": len(pooled),
        "chains": per_chain,
        "acceptance_rate": pooled.acceptance_rate,
        "e_rms": validation_error(exp.model, theta, exp.validation),
    }
    return RunResult(theta=theta.to_dict(), metrics=metrics, posterior=posterior, artifacts=artifacts)


DISPATCH = {
    "smc": _run_filter,
    "twisted-smc": _run_filter,
    "gradsearch": _run_gradsearch,
    "pem": _run_pem,
    "psaem": _run_psaem,
    "mh": _run_bayes,
    "pmmh": _run_bayes,
    "pg": _run_bayes,
    "pgas": _run_bayes,
}


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def run_experiment(config: ExperimentConfig, command: Optional[Sequence[str]] = None,
                   registry: Optional[ModelRegistry] = None) -> RunResult:
    """
    Run one experiment and write its run directory.

    Configuration, capability and dataset problems are raised before the
    run directory is created. Failures during the run itself are recorded
    in the summary (status "failed", structured error, exit code) and the
    partial artifacts are kept.

    Args:
        config: Experiment configuration
        command: Command line recorded in the manifest (default sys.argv)
        registry: Model registry (default: built-in models)

    Returns:
        RunResult whose ``exit_code`` the CLI returns

    Raises:
        ConfigError / CapabilityError: invalid or incompatible configuration
        DatasetError: unreadable or mismatched dataset
        OutputExistsError: run directory holds results and force is off
    """
    config.check()
    model = build_model(config, registry)
    prior = resolve_prior(model, config)
    free = resolve_free(model, config, prior)
    if config.is_bayesian and prior is not None:
        missing = [name for name in free if name not in prior]
        if missing:
            raise ConfigError("Prior must cover every free parameter", missing=missing)
    theta0 = model.parameters(config.params, free)
    data, validation = load_data(model, config)
    run_dir = prepare_run_directory(config.output_root(), config.run_name, config.force)

    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "version": package_version(),
        "command": list(command if command is not None else sys.argv),
        "dataset_sha256": _digest(config.dataset),
        "validation_sha256": _digest(config.validation_dataset),
        "data": {"name": data.name, "T": data.T, "observed": data.num_observed},
    }
    write_json(run_dir / MANIFEST_FILE, manifest)
    exp = Experiment(config, model, data, validation, theta0, prior, run_dir)

    logger.info("Running %s on %s (T=%d, seed=%d) -> %s", config.algorithm, model.name, data.T, config.seed, run_dir)
    start = time.perf_counter()
    try:
        result = DISPATCH[config.algorithm](exp)
    except SysIdError as e:
        logger.error("Run failed: %s", e)
        result = RunResult(status="failed", theta=theta0.to_dict(), error=e.to_dict(), exit_code=exit_code_for(e))
    wall = time.perf_counter() - start
    result.algorithm = config.algorithm
    result.model = config.model
    result.artifacts = sorted(set(result.artifacts) | {MANIFEST_FILE, SUMMARY_FILE, TIMING_FILE})
    write_json(run_dir / SUMMARY_FILE, result.to_dict())
    write_json(run_dir / TIMING_FILE, {"wall_time_s": wall})
    logger.info("Finished in %.2f s with status %s", wall, result.status)
    return result


def summarize_run(run_dir: Path, burn_in: Optional[int] = None) -> Dict[str, Any]:
    """
    Recompute summaries from the traces of a finished run.

    Chain runs get posterior summaries (mean, sd, quantiles, IACT, ESS) of
    the pooled post-burn-in samples plus per-chain acceptance and IACT;
    learner runs report the last trace row.

    Raises:
        DatasetError: the directory holds no manifest
    """
    run_dir = Path(run_dir)
    files = scan_run_directory(run_dir)
    if files["manifest"] is None:
        raise DatasetError("Not a run directory (no manifest)", path=str(run_dir))
    manifest = read_json(Path(files["manifest"]))
    out: Dict[str, Any] = {"run": run_dir.name, "algorithm": manifest["config"]["algorithm"],
                           "model": manifest["config"]["model"], "seed": manifest["seed"]}
    if files["chain_traces"]:
        traces = [ChainTrace.from_jsonl(Path(path), seed=manifest["seed"]) for path in files["chain_traces"]]
        out["chains"] = []
        for path, trace in zip(files["chain_traces"], traces):
            summary = trace.summary(burn_in)
            out["chains"].append({
                "file": Path(path).name,
                "length": len(trace),
                "acceptance_rate": trace.acceptance_rate,
                "iact": {name: stats["iact"] for name, stats in summary.items()},
            })
        pooled = pool_chains(traces, burn_in)
        out["posterior"] = pooled.summary(burn_in=0)
        out["samples"] = len(pooled)
    trace_csv = run_dir / "trace.csv"
    if trace_csv.exists():
        frame = pd.read_csv(trace_csv)
        last = frame.iloc[-1].to_dict()
        out["final"] = last
        out["iterations"] = int(last["iter"])
    runs_csv = run_dir / "smc_runs.csv"
    if runs_csv.exists():
        frame = pd.read_csv(runs_csv)
        out["logZ"] = {"mean": float(frame["logZ"].mean()),
                       "var": float(frame["logZ"].var(ddof=1)) if len(frame) > 1 else None,
                       "runs": len(frame)}
    return out
