import json

import pandas as pd
import pytest

from locprod.main import default_grid, main, shortcut_bandwidth
from locprod.models.config import SimConfig
from locprod.simulator import generate_panel


@pytest.fixture
def run(micro_config, micro_csv):
    """Invoke the CLI on the bundled fixture"""
    def invoke(command, output, *flags, input_path=micro_csv):
        argv = [command, "--config", str(micro_config), "--output", str(output), "--quiet"]
        if input_path is not None:
            argv += ["--input", str(input_path)]
        return main([*argv, *flags])
    return invoke


def read_json(path):
    return json.loads(path.read_text())


def test_estimate_writes_artifacts(run, tmp_path):
    assert run("estimate", tmp_path) == 0
    for name in ("coefficients.csv", "observations.csv", "manifest.json"):
        assert (tmp_path / name).exists()
    coefficients = pd.read_csv(tmp_path / "coefficients.csv")
    assert len(coefficients) == 6
    assert {"beta_K", "beta_L", "beta_M", "rho0", "rho1", "rts", "theta", "flagged"} <= set(coefficients.columns)
    manifest = read_json(tmp_path / "manifest.json")
    assert manifest["command"] == "estimate"
    assert manifest["results"]["observations"] == 120
    assert manifest["config"]["schema"]["period"] == "year"
    assert "wall_time_seconds" not in manifest


def test_estimate_rerun_is_byte_identical(run, tmp_path):
    assert run("estimate", tmp_path) == 0
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    assert run("estimate", tmp_path) == 0
    second = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    assert first == second


def test_rerun_from_manifest(run, tmp_path):
    assert run("estimate", tmp_path / "a") == 0
    manifest = tmp_path / "a" / "manifest.json"
    assert main(["estimate", "--config", str(manifest), "--output", str(tmp_path / "b"), "--quiet"]) == 0
    for name in ("coefficients.csv", "observations.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_column_exit_code(run, tmp_path, micro_csv):
    broken = tmp_path / "broken.csv"
    pd.read_csv(micro_csv).drop(columns=["lon"]).to_csv(broken, index=False)
    assert run("estimate", tmp_path / "out", input_path=broken) == 2
    error = read_json(tmp_path / "out" / "error.json")
    assert error["type"] == "PanelSchemaError"
    assert error["details"]["column"] == "lon"
    assert error["exit_code"] == 2


def test_missing_input_file(run, tmp_path):
    assert run("estimate", tmp_path, input_path=tmp_path / "nope.csv") == 2
    assert read_json(tmp_path / "error.json")["error"] == "config"


def test_invalid_replicate_count(run, tmp_path):
    assert run("infer", tmp_path, "--B", "0") == 2
    assert read_json(tmp_path / "error.json")["type"] == "ConfigError"


def test_cv(run, tmp_path):
    assert run("cv", tmp_path, "--h1", "cv") == 0
    scores = pd.read_csv(tmp_path / "cv_scores.csv")
    assert set(scores["step"]) == {1, 2}
    results = read_json(tmp_path / "manifest.json")["results"]
    assert results["h1"] in (20, 60, 120) and results["h2"] in (20, 60, 120)


def test_infer_invariant(run, tmp_path):
    assert run("infer", tmp_path, "--invariant") == 0
    intervals = pd.read_csv(tmp_path / "intervals.csv")
    assert list(intervals["functional"]) == ["mean:beta_K", "mean:beta_M", "beta_K@0,0", "mean:rts"]
    assert (intervals["lower"] <= intervals["upper"]).all()
    draws = pd.read_csv(tmp_path / "draws.csv")
    assert set(draws.columns) == {"functional", "replicate", "value"}
    assert read_json(tmp_path / "intervals.json")["intervals"][0]["functional"] == "mean:beta_K"


def test_infer_is_seed_deterministic(run, tmp_path):
    assert run("infer", tmp_path / "a", "--invariant") == 0
    assert run("infer", tmp_path / "b", "--invariant") == 0
    assert (tmp_path / "a" / "draws.csv").read_bytes() == (tmp_path / "b" / "draws.csv").read_bytes()


def test_invariance_test(run, tmp_path):
    assert run("test-invariance", tmp_path, "--B", "20") == 0
    result = read_json(tmp_path / "invariance_test.json")
    assert 0 < result["p_value"] <= 1
    assert result["successful_replicates"] + result["excluded_replicates"] == 20


def test_decompose(run, tmp_path):
    assert run("decompose", tmp_path) == 0
    records = pd.read_csv(tmp_path / "decomposition.csv")
    assert 0 < len(records) <= 6
    assert (records["d_prod"] - records["d_tech"] - records["d_tfp"]).abs().max() < 1e-9
    summary = pd.read_csv(tmp_path / "decomposition_summary.csv")
    assert list(summary["component"]) == ["d_prod", "d_tech", "d_tfp"]


def test_simulate_smoke(run, tmp_path):
    assert run("simulate", tmp_path, "--Q", "1", "--n", "40", "--T", "5", input_path=None) == 0
    table = pd.read_csv(tmp_path / "monte_carlo.csv")
    assert list(table["parameter"]) == ["beta_M", "beta_K", "rho0", "rho1"]
    manifest = read_json(tmp_path / "manifest.json")
    assert manifest["config"]["simulation"]["seed"] == 11
    assert "wall_time_seconds" in manifest


def test_environment_overrides_file_and_flags_override_environment(run, tmp_path, monkeypatch):
    monkeypatch.setenv("LOCPROD_SEED", "5")
    assert run("estimate", tmp_path / "env") == 0
    manifest = read_json(tmp_path / "env" / "manifest.json")
    assert manifest["config"]["seed"] == 5
    assert manifest["environment"]["LOCPROD_SEED"] == "5"
    assert run("estimate", tmp_path / "flag", "--seed", "7") == 0
    assert read_json(tmp_path / "flag" / "manifest.json")["config"]["seed"] == 7


def test_default_bandwidths():
    panel = generate_panel(SimConfig(n=20, T=5, seed=0)).panel
    assert default_grid(panel) == [5, 10, 20, 35, 50, 75, 100]
    assert shortcut_bandwidth(panel) == round(0.3 * 100 ** 0.8)


@pytest.fixture
def study_config(tmp_path):
    """Simulation-only config: no input panel"""
    path = tmp_path / "study.yaml"
    path.write_text("B: 60\nQ: 1\nseed: 2\nworkers: 1\nsimulation:\n  n: 30\n  T: 5\n  h: 50\n")
    return path


def test_coverage_smoke(study_config, tmp_path):
    out = tmp_path / "coverage"
    assert main(["coverage", "--config", str(study_config), "--output", str(out), "--quiet"]) == 0
    coverage = pd.read_csv(out / "coverage.csv")
    assert list(coverage["functional"]) == ["mean:beta_K", "beta_K@0.65", "beta_K@0.75", "beta_K@0.85"]
    assert {"functional", "n", "coverage", "simulations", "B", "level"} <= set(coverage.columns)
    assert (out / "power.csv").exists()
    manifest = read_json(out / "manifest.json")
    assert manifest["command"] == "coverage"
    assert manifest["files"] == {"coverage": "coverage.csv", "power": "power.csv"}
    assert manifest["results"]["sizes"] == [30]
    assert "wall_time_seconds" in manifest


def test_invariance_study_without_input(study_config, tmp_path):
    out = tmp_path / "study"
    argv = ["test-invariance", "--config", str(study_config), "--output", str(out), "--quiet", "--Q", "2", "--B", "10"]
    assert main(argv) == 0
    study = read_json(out / "invariance_study.json")
    assert study["replicates"] + study["failures"] == 2
    assert study["B"] == 10
    p_values = pd.read_csv(out / "invariance_p_values.csv")
    assert list(p_values.columns) == ["replicate", "p_value"]
    assert ((p_values["p_value"] > 0) & (p_values["p_value"] <= 1)).all()
    manifest = read_json(out / "manifest.json")
    assert manifest["command"] == "test-invariance"
    assert set(manifest["files"]) == {"study", "p_values"}
    assert "wall_time_seconds" in manifest
