"""
Tests for experiment configuration: loading, overrides and validation.
"""

import os
from pathlib import Path
from unittest.mock import patch

import pytest

from particle_sysid.config import (
    DEFAULT_CONFIG,
    OUTPUT_ROOT_ENV,
    EmSettings,
    ExperimentConfig,
    McmcSettings,
    SmcSettings,
)
from particle_sysid.errors import ConfigError


class TestDefaults:
    """Test the default configuration."""

    def test_default_is_valid(self):
        assert DEFAULT_CONFIG.validate() == []
        assert DEFAULT_CONFIG.model == "lgss-demo"
        assert DEFAULT_CONFIG.algorithm == "smc"

    def test_run_name(self):
        assert ExperimentConfig(model="watertank", algorithm="pmmh", seed=3).run_name == "watertank-pmmh-seed3"
        assert ExperimentConfig(name="custom").run_name == "custom"

    def test_smc_options(self):
        assert SmcSettings().smc_options() == {"resampling": "systematic", "ess_threshold": None}
        options = SmcSettings(twisted=True, matched_proposal=True).smc_options()
        assert options["twisted"] is True
        assert options["matched_proposal"] is True

    def test_with_seed(self):
        config = ExperimentConfig(seed=1)
        assert config.with_seed(9).seed == 9
        assert config.seed == 1


class TestLoading:
    """Test reading configs from mappings and files."""

    def test_blocks_become_settings(self):
        config = ExperimentConfig.from_dict({"smc": {"particles": 500}, "mcmc": {"iterations": 20}})
        assert isinstance(config.smc, SmcSettings)
        assert config.smc.particles == 500
        assert config.mcmc == McmcSettings(iterations=20)
        assert config.em == EmSettings()

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError) as excinfo:
            ExperimentConfig.from_dict({"particles": 10})
        assert excinfo.value.context["keys"] == ["particles"]

    def test_unknown_block_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"smc": {"n": 10}})

    def test_block_must_be_mapping(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"em": [1, 2]})

    def test_not_a_mapping(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_yaml("- a\n- b\n")

    def test_yaml_file(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(
            "model: watertank\n"
            "model_options: {structure: k135}\n"
            "algorithm: psaem\n"
            "smc: {particles: 50}\n"
            "em: {iters: 5}\n"
            "seed: 1\n"
        )
        config = ExperimentConfig.from_file(path)
        assert config.model_options == {"structure": "k135"}
        assert config.em.iters == 5
        assert config.validate() == []

    def test_file_round_trip(self, tmp_path):
        config = ExperimentConfig(model="dengue", algorithm="pg", params={"rho": 0.4}, chains=2)
        for suffix in (".yaml", ".json"):
            path = tmp_path / f"config{suffix}"
            config.to_file(path)
            assert ExperimentConfig.from_file(path) == config

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_file(tmp_path / "absent.yaml")

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("smc: {particles: [\n")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_file(path)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_file(path)


class TestOverrides:
    """Test ``key.sub=value`` overrides."""

    def test_values_parse_as_yaml(self):
        config = DEFAULT_CONFIG.apply_overrides(["smc.particles=500", "free=[Q, R]", "seed=7",
                                                 "smc.ess_threshold=0.5"])
        assert config.smc.particles == 500
        assert config.free == ["Q", "R"]
        assert config.seed == 7
        assert config.smc.ess_threshold == 0.5
        assert DEFAULT_CONFIG.smc.particles == 100

    def test_nested_mapping_from_none(self):
        config = DEFAULT_CONFIG.apply_overrides(["prior.Q={dist: invgamma, a: 1.0, b: 1.0}"])
        assert config.prior == {"Q": {"dist": "invgamma", "a": 1.0, "b": 1.0}}

    def test_missing_equals_sign(self):
        with pytest.raises(ConfigError):
            DEFAULT_CONFIG.apply_overrides(["smc.particles"])

    def test_unknown_path(self):
        with pytest.raises(ConfigError):
            DEFAULT_CONFIG.apply_overrides(["nothing.here=1"])

    def test_unknown_block_key(self):
        with pytest.raises(ConfigError):
            DEFAULT_CONFIG.apply_overrides(["smc.size=1"])


class TestValidation:
    """Test value checks."""

    @pytest.mark.parametrize(
        "overrides,fragment",
        [
            ({"algorithm": "sgd"}, "algorithm must be one of"),
            ({"model": "pendulum"}, "unknown model"),
            ({"dataset_format": "xls"}, "unknown dataset_format"),
            ({"smc": SmcSettings(particles=1)}, "smc.particles"),
            ({"smc": SmcSettings(resampling="residual")}, "smc.resampling"),
            ({"smc": SmcSettings(ess_threshold=1.5)}, "smc.ess_threshold"),
            ({"em": EmSettings(gamma_exponent=0.4)}, "em.gamma_exponent"),
            ({"mcmc": McmcSettings(iterations=10, burn_in=10)}, "mcmc.burn_in"),
            ({"mcmc": McmcSettings(proposal_scale=0.0)}, "mcmc.proposal_scale"),
            ({"seed": -1}, "seed"),
            ({"chains": 0}, "chains must be >= 1"),
            ({"chains": 2, "algorithm": "pem"}, "Bayesian algorithm"),
            ({"synthetic_length": 1}, "synthetic_length"),
        ],
    )
    def test_reports_problem(self, overrides, fragment):
        errors = ExperimentConfig(**overrides).validate()
        assert any(fragment in error for error in errors), errors

    def test_bad_prior(self):
        errors = ExperimentConfig(prior={"Q": {"dist": "wishart"}}).validate()
        assert len(errors) == 1
        assert errors[0].startswith("prior:")

    def test_check_lists_every_problem(self):
        config = ExperimentConfig(algorithm="sgd", seed=-1)
        with pytest.raises(ConfigError) as excinfo:
            config.check()
        assert len(excinfo.value.context["problems"]) == 2

    def test_multiple_chains_for_bayesian_algorithm(self):
        assert ExperimentConfig(algorithm="pmmh", chains=4).validate() == []


class TestOutputRoot:
    """Test output location resolution."""

    def test_config_value_wins(self, tmp_path):
        with patch.dict(os.environ, {OUTPUT_ROOT_ENV: "/elsewhere"}):
            assert ExperimentConfig(output_dir=str(tmp_path)).output_root() == tmp_path

    def test_environment_variable(self):
        with patch.dict(os.environ, {OUTPUT_ROOT_ENV: "/data/runs"}):
            assert ExperimentConfig().output_root() == Path("/data/runs")

    def test_default(self, monkeypatch):
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        assert ExperimentConfig().output_root() == Path("sysid_outputs")


class TestShippedConfigs:
    """Test the example configs under configs/."""

    @pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "configs").glob("*.yaml")),
                             ids=lambda p: p.name)
    def test_loads_and_validates(self, path):
        config = ExperimentConfig.from_file(path)
        assert config.validate() == []
