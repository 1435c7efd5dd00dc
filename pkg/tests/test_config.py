import pytest
from pydantic import ValidationError

from locprod.errors import ConfigError
from locprod.main import build_parser, load_config
from locprod.models.config import RunConfig, SimConfig
from locprod.tools.residuals import TechnologyForm


def test_run_config_defaults():
    config = RunConfig()
    assert config.B == 199
    assert config.tech is TechnologyForm.COBB_DOUGLAS
    assert config.sidedness == "two-sided"
    assert config.simulation == SimConfig()


def test_bandwidth_accepts_cv_or_positive_counts():
    assert RunConfig(h1="cv", h2=40).h1 == "cv"
    with pytest.raises(ValidationError):
        RunConfig(h1=0)
    with pytest.raises(ValidationError):
        RunConfig(h_grid=[])


def test_replicates_must_be_positive():
    with pytest.raises(ValidationError):
        RunConfig(B=0)
    with pytest.raises(ValidationError):
        RunConfig(alpha=0.0)


def test_unknown_keys_rejected():
    with pytest.raises(ValidationError):
        RunConfig(bandwidth=10)


def test_manifest_block_uses_schema_alias():
    block = RunConfig(schema={"period": "year"}).manifest_block()
    assert block["schema"]["period"] == "year"
    assert RunConfig.model_validate(block) == RunConfig(schema={"period": "year"})


def test_sim_config_validators():
    with pytest.raises(ValidationError):
        SimConfig(T=1)
    with pytest.raises(ValidationError):
        SimConfig(k0_low=5.0, k0_high=5.0)
    assert SimConfig(n=200, T=10).shortcut_h == round(0.3 * 2000 ** 0.8)
    assert SimConfig(h=15).bandwidth == 15


def test_invariant_truth_uses_grid_mean():
    config = SimConfig(invariant_truth=True)
    assert config.beta_K(0.5) == pytest.approx(config.beta_K(0.99))
    assert config.beta_K(0.5) == pytest.approx(0.2 + 0.1 * 0.745)


def test_flag_parsing(tmp_path):
    args = build_parser().parse_args(["infer", "--h1", "cv", "--h2", "30", "--functional", "theta",
                                      "--functional", "mean:beta_K", "--per-period", "--output", str(tmp_path)])
    config = load_config(args)
    assert config.h1 == "cv" and config.h2 == 30
    assert config.functionals == ["theta", "mean:beta_K"]
    assert config.pooled is False
    assert config.command == "infer"


def test_bad_bandwidth_flag():
    args = build_parser().parse_args(["estimate", "--h1", "wide"])
    with pytest.raises(ConfigError):
        load_config(args)


def test_seed_is_mirrored_into_simulation(micro_config):
    args = build_parser().parse_args(["simulate", "--config", str(micro_config), "--n", "50"])
    config = load_config(args)
    assert config.simulation.seed == config.seed == 11
    assert config.simulation.n == 50
