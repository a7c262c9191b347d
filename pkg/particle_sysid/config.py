"""
Experiment configuration.

One YAML (or JSON) file describes a run: the model and its options, the
dataset, the algorithm with its hyperparameter blocks, the prior, the seed
and the output location. Command-line ``--set key.sub=value`` overrides are
applied on top before validation.

Usage:
    config = ExperimentConfig.from_file(Path("configs/lgss_pmmh.yaml"))
    config = config.apply_overrides(["mcmc.iterations=2000", "seed=7"])
    config.check()

Example file:
    model: watertank
    model_options: {structure: full}
    dataset: data/tanks_train.csv
    validation_dataset: data/tanks_val.csv
    algorithm: psaem
    smc: {particles: 50}
    em: {iters: 50}
    seed: 1
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml

from .core import Prior
from .errors import ConfigError, SysIdError
from .smc import RESAMPLING_SCHEMES

ALGORITHMS = ("smc", "twisted-smc", "gradsearch", "pem", "psaem", "mh", "pmmh", "pg", "pgas")
BAYESIAN_ALGORITHMS = ("mh", "pmmh", "pg", "pgas")
OUTPUT_ROOT_ENV = "PARTICLE_SYSID_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "sysid_outputs"


@dataclass
class SmcSettings:
    """Particle filter settings shared by every algorithm."""
    particles: int = 100
    resampling: str = "systematic"
    ess_threshold: Optional[float] = None   # None resamples every step
    twisted: bool = False
    matched_proposal: bool = False
    runs: int = 1                            # independent logZ estimates for the "smc" algorithms
    diagnostics: bool = False                # per-step JSONL dump of the first run

    def smc_options(self) -> Dict[str, Any]:
        """Keyword arguments understood by ``estimate_loglik``."""
        options: Dict[str, Any] = {"resampling": self.resampling, "ess_threshold": self.ess_threshold}
        if self.twisted:
            options.update({"twisted": True, "matched_proposal": self.matched_proposal})
        return options


@dataclass
class SearchSettings:
    """Gradient/Newton search settings."""
    max_iters: int = 50
    newton: bool = True
    initial_step: float = 1.0
    max_backtracks: int = 10
    c1: float = 1e-4
    probe_runs: int = 5
    kappa_every: int = 10
    max_step_norm: Optional[float] = None


@dataclass
class EmSettings:
    """Exact EM and PSAEM settings."""
    iters: int = 50
    gamma_exponent: float = 0.7
    step_sizes: Optional[List[float]] = None
    prune_below: float = 1e-6
    loglik_particles: int = 0
    m_step_maxiter: int = 200


@dataclass
class McmcSettings:
    """MH, PMMH and particle Gibbs settings."""
    iterations: int = 1000
    burn_in: Optional[int] = None           # default M / 10
    proposal_scale: float = 0.1             # isotropic random-walk sd on the unconstrained scale
    proposal_cov: Optional[List[List[float]]] = None
    adapt: bool = False
    adapt_interval: int = 100
    keep_trajectories: bool = False


_BLOCKS = {"smc": SmcSettings, "search": SearchSettings, "em": EmSettings, "mcmc": McmcSettings}


@dataclass
class ExperimentConfig:
    """
    Complete description of one experiment.

    Every field has a default so a config file only lists what differs.
    """

    # ========== Model and data ==========
    model: str = "lgss-demo"
    model_options: Dict[str, Any] = field(default_factory=dict)
    dataset: Optional[str] = None                # CSV; simulated from the model when absent
    validation_dataset: Optional[str] = None     # held-out CSV for e_RMS
    synthetic_length: int = 100
    synthetic_params: Dict[str, float] = field(default_factory=dict)   # truth for simulated data; defaults to params
    dataset_format: str = "auto"                 # auto | generic | watertank | dengue

    # ========== Algorithm ==========
    algorithm: str = "smc"
    params: Dict[str, float] = field(default_factory=dict)
    free: Optional[List[str]] = None             # defaults to the model's learnable parameters
    prior: Optional[Dict[str, Dict[str, Any]]] = None   # defaults to the model's prior

    smc: SmcSettings = field(default_factory=SmcSettings)
    search: SearchSettings = field(default_factory=SearchSettings)
    em: EmSettings = field(default_factory=EmSettings)
    mcmc: McmcSettings = field(default_factory=McmcSettings)

    # ========== Run ==========
    seed: int = 0
    chains: int = 1
    output_dir: Optional[str] = None
    force: bool = False
    name: Optional[str] = None

    # ------------------------------------------------------------------
    # Serialization
    # ------------------------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        """Convert configuration to a plain dictionary."""
        return asdict(self)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def to_file(self, path: Path) -> None:
        """Save as YAML, or JSON when the suffix is .json."""
        path = Path(path)
        path.write_text(self.to_json() if path.suffix == ".json" else self.to_yaml(), encoding="utf-8")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        """
        Create configuration from a dictionary.

        Raises:
            ConfigError: unknown keys or malformed blocks
        """
        if not isinstance(data, dict):
            raise ConfigError("Configuration must be a mapping", got=type(data).__name__)
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError("Unknown configuration keys", keys=unknown)
        for key, block_cls in _BLOCKS.items():
            if key in data and not isinstance(data[key], block_cls):
                block = data[key] or {}
                if not isinstance(block, dict):
                    raise ConfigError("Configuration block must be a mapping", block=key)
                block_known = {f.name for f in fields(block_cls)}
                bad = sorted(set(block) - block_known)
                if bad:
                    raise ConfigError("Unknown keys in configuration block", block=key, keys=bad)
                data[key] = block_cls(**block)
        return cls(**data)

    @classmethod
    def from_json(cls, json_str: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(json_str))

    @classmethod
    def from_yaml(cls, yaml_str: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(yaml_str)
        except yaml.YAMLError as e:
            raise ConfigError("Configuration is not valid YAML", reason=str(e)) from e
        return cls.from_dict(data or {})

    @classmethod
    def from_file(cls, path: Path) -> "ExperimentConfig":
        """
        Load configuration from a YAML or JSON file.

        Raises:
            ConfigError: missing or unreadable file
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError("Config file not found", path=str(path))
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".json":
            try:
                return cls.from_json(text)
            except json.JSONDecodeError as e:
                raise ConfigError("Configuration is not valid JSON", path=str(path), reason=str(e)) from e
        return cls.from_yaml(text)

    # ------------------------------------------------------------------
    # Overrides
    # ------------------------------------------------------------------

    def apply_overrides(self, overrides: Sequence[str]) -> "ExperimentConfig":
        """
        Return a copy with ``key.sub=value`` assignments applied.

        Values are parsed as YAML scalars, so ``smc.particles=500`` sets an int
        and ``free=[Q, R]`` sets a list.
        """
        data = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError("Override must look like key=value", override=item)
            key, raw = item.split("=", 1)
            try:
                value = yaml.safe_load(raw)
            except yaml.YAMLError as e:
                raise ConfigError("Override value is not valid YAML", override=item) from e
            target = data
            parts = key.strip().split(".")
            for part in parts[:-1]:
                if part not in target or not isinstance(target[part], dict):
                    if part in target and target[part] is None:
                        target[part] = {}
                    else:
                        raise ConfigError("Override path does not exist", override=item)
                target = target[part]
            target[parts[-1]] = value
        return ExperimentConfig.from_dict(data)

    # ------------------------------------------------------------------
    # Validation
    # ------------------------------------------------------------------

    def validate(self) -> List[str]:
        """
        Validate configuration values.

        Returns:
            List of validation errors (empty if valid)
        """
        from .systems.registry import ModelRegistry

        errors = []
        if self.algorithm not in ALGORITHMS:
            errors.append(f"algorithm must be one of {', '.join(ALGORITHMS)} (got {self.algorithm!r})")
        if self.model not in ModelRegistry().model_ids:
            errors.append(f"unknown model {self.model!r}")
        if self.dataset_format not in ("auto", "generic", "watertank", "dengue"):
            errors.append(f"unknown dataset_format {self.dataset_format!r}")
        if self.smc.particles < 2:
            errors.append("smc.particles must be >= 2")
        if self.smc.resampling not in RESAMPLING_SCHEMES:
            errors.append(f"smc.resampling must be one of {', '.join(RESAMPLING_SCHEMES)}")
        if self.smc.ess_threshold is not None and not 0.0 < self.smc.ess_threshold <= 1.0:
            errors.append("smc.ess_threshold must lie in (0, 1]")
        if self.smc.runs < 1:
            errors.append("smc.runs must be >= 1")
        if self.search.max_iters < 0 or self.em.iters < 0:
            errors.append("iteration counts must be >= 0")
        if self.search.initial_step <= 0:
            errors.append("search.initial_step must be > 0")
        if not 0.5 < self.em.gamma_exponent <= 1.0:
            errors.append("em.gamma_exponent must lie in (0.5, 1]")
        if self.mcmc.iterations < 1:
            errors.append("mcmc.iterations must be >= 1")
        if self.mcmc.burn_in is not None and not 0 <= self.mcmc.burn_in < self.mcmc.iterations:
            errors.append("mcmc.burn_in must lie in [0, iterations)")
        if self.mcmc.proposal_scale <= 0:
            errors.append("mcmc.proposal_scale must be > 0")
        if self.seed < 0:
            errors.append("seed must be >= 0")
        if self.chains < 1:
            errors.append("chains must be >= 1")
        if self.chains > 1 and not self.is_bayesian:
            errors.append("chains > 1 needs a Bayesian algorithm (mh, pmmh, pg, pgas)")
        if self.synthetic_length < 2:
            errors.append("synthetic_length must be >= 2")
        if self.prior is not None:
            try:
                Prior.from_dict(self.prior)
            except SysIdError as e:
                errors.append(f"prior: {e.message}")
        return errors

    def check(self) -> None:
        """Raise ConfigError listing every validation problem."""
        errors = self.validate()
        if errors:
            raise ConfigError("Invalid configuration", problems=errors)

    @property
    def is_bayesian(self) -> bool:
        return self.algorithm in BAYESIAN_ALGORITHMS

    @property
    def run_name(self) -> str:
        return self.name or f"{self.model}-{self.algorithm}-seed{self.seed}"

    def output_root(self) -> Path:
        """Output root: config value, then $PARTICLE_SYSID_OUTPUT_ROOT, then ./sysid_outputs."""
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.getenv(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)


DEFAULT_CONFIG = ExperimentConfig()
