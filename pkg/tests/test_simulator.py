import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import single_location
from locprod.errors import ConfigError
from locprod.estimator import estimate_invariant
from locprod.models.config import SimConfig
from locprod.models.panel import PanelDataset
from locprod.simulator import (
    coverage_study,
    generate_panel,
    material_demand,
    rejection_rate,
    run_monte_carlo,
    sample_splitting_estimator,
    simulation_seed,
    true_value,
)


# =============================================================================
# DATA GENERATION
# =============================================================================

def test_material_demand_closed_form():
    assert material_demand(1.0, 0.0, 0.3, 0.5) == pytest.approx(0.25)
    assert material_demand(np.e, 0.0, 0.5, 0.5) == pytest.approx(0.5 ** 2 * np.e)


def test_coefficient_surfaces():
    config = SimConfig()
    assert config.beta_K(0.5) == pytest.approx(0.25)
    assert config.beta_M(0.99) == pytest.approx(0.666475, abs=1e-6)
    assert config.rho0(0.5) == pytest.approx(0.75)
    assert config.grid[0] == 0.5 and config.grid[-1] == 0.99 and config.grid.size == 50


def test_zero_noise_share_is_log_elasticity(zero_noise_sim):
    panel, truth = zero_noise_sim.panel, zero_noise_sim.truth
    assert_allclose(panel.v, np.log(truth.coefficient("beta_M")), atol=1e-10)


def test_noisy_share_carries_eta(small_sim, small_config):
    panel, truth = small_sim.panel, small_sim.truth
    expected = np.log(truth.coefficient("beta_M") * small_config.theta) - truth.eta
    assert_allclose(panel.v, expected, atol=1e-10)


def test_productivity_follows_ar1(small_sim, small_config):
    truth = small_sim.truth
    T = small_config.T
    omega = truth.omega.reshape(-1, T)
    rho0 = truth.coefficient("rho0").reshape(-1, T)[:, 0]
    assert_allclose(omega[:, 0], rho0)
    zeta = truth.zeta.reshape(-1, T)
    assert_allclose(omega[:, 1:], rho0[:, None] + 0.7 * omega[:, :-1] + zeta[:, 1:], atol=1e-12)


def test_panel_layout(small_sim, small_config):
    panel = small_sim.panel
    assert panel.n_obs == small_config.n * small_config.T
    assert panel.l is None and panel.dim == 1
    assert set(np.round(panel.locations[:, 0], 10)) <= set(small_config.grid)
    assert panel.firm_id[0] == "F00000"


def test_generation_is_seed_deterministic():
    a = generate_panel(SimConfig(n=20, T=4, seed=6)).panel
    b = generate_panel(SimConfig(n=20, T=4, seed=6)).panel
    c = generate_panel(SimConfig(n=20, T=4, seed=7)).panel
    assert_array_equal(a.y, b.y)
    assert_array_equal(a.coords, b.coords)
    assert not np.array_equal(a.y, c.y)


def test_simulation_seeds_differ_across_replicates():
    config = SimConfig(seed=1)
    assert simulation_seed(config, 0) != simulation_seed(config, 1)
    assert simulation_seed(config, 3) == simulation_seed(SimConfig(seed=1), 3)


def test_beta_m_must_stay_below_one():
    with pytest.raises(ValueError):
        SimConfig(grid_start=1.5)


# =============================================================================
# SAMPLE SPLITTING
# =============================================================================

def test_sample_splitting_on_one_location_is_invariant_fit(small_panel):
    panel = single_location(small_panel)
    frame = sample_splitting_estimator(panel)
    assert len(frame) == 1 and not frame["flagged"].iloc[0]
    params = estimate_invariant(panel).parameters(0)
    for name in ("beta_M", "beta_K", "rho0", "rho1", "theta"):
        assert frame[name].iloc[0] == pytest.approx(params[name], abs=1e-12)


def test_sample_splitting_flags_thin_location(small_panel):
    base = single_location(small_panel)
    panel = PanelDataset.from_arrays(
        firm_id=np.concatenate([base.firm_id, np.array(["Z", "Z"], dtype=object)]),
        period=np.concatenate([base.period, [1, 2]]),
        y=np.concatenate([base.y, [1.0, 1.1]]),
        k=np.concatenate([base.k, [2.0, 2.1]]),
        l=None,
        m=np.concatenate([base.m, [1.5, 1.6]]),
        coords=np.concatenate([base.coords, np.full(2, 0.9)]),
        v=np.concatenate([base.v, [-0.6, -0.6]]),
        price_ratio=np.concatenate([base.price_ratio, base.price_ratio[:2]]),
    )
    frame = sample_splitting_estimator(panel).set_index("latitude")
    assert not frame.loc[0.7, "flagged"]
    assert frame.loc[0.9, "flagged"]
    assert np.isnan(frame.loc[0.9, "beta_K"])
    assert frame.loc[0.9, "reason"]


# =============================================================================
# MONTE CARLO
# =============================================================================

def test_monte_carlo_metric_identities():
    report = run_monte_carlo(SimConfig(n=30, T=5, seed=1), Q=2, h=50, progress=False)
    frame = report.frame()
    assert list(frame["parameter"]) == ["beta_M", "beta_K", "rho0", "rho1"]
    assert (frame["rmse"] >= frame["mae"] - 1e-15).all()
    assert (frame["mae"] >= frame["bias"].abs() - 1e-15).all()
    assert (frame["Q"] == 2).all()
    assert len(report.per_simulation) == 2


def test_monte_carlo_rejects_unknown_estimator():
    with pytest.raises(ConfigError):
        run_monte_carlo(SimConfig(n=10, T=3), Q=1, estimator="ols", progress=False)


def test_true_mean_averages_the_whole_grid():
    config = SimConfig(grid_size=3, grid_step=0.2)
    assert true_value("mean:beta_K", config) == pytest.approx(0.2 + 0.1 * 0.7)
    assert true_value("beta_K@0.9", config) == pytest.approx(0.29)


def test_alpha_one_has_zero_coverage():
    report = coverage_study(SimConfig(n=30, T=5, seed=2), Q=1, B=60, alpha=1.0, h=50, progress=False)
    assert report.coverage["mean:beta_K"] == 0.0
    assert report.evaluated["mean:beta_K"] == 1
    assert set(report.power["functional"]) == set(report.functionals)


# =============================================================================
# SIMULATION ACCEPTANCE
# =============================================================================

@pytest.mark.slow
def test_first_step_is_precise():
    report = run_monte_carlo(SimConfig(n=100, T=10, seed=0), Q=20, progress=False, n_jobs=-1)
    metrics = report.metrics.set_index("parameter")
    assert metrics.loc["beta_M", "rmse"] < 0.01


@pytest.mark.slow
def test_second_step_rmse_targets():
    targets = {
        200: {"beta_K": 0.0388, "rho0": 0.0508, "rho1": 0.0238},
        400: {"beta_K": 0.0278, "rho0": 0.0356, "rho1": 0.0178},
    }
    for n, expected in targets.items():
        report = run_monte_carlo(SimConfig(n=n, T=10, seed=0), Q=200, progress=False, n_jobs=-1)
        metrics = report.metrics.set_index("parameter")
        for name, value in expected.items():
            assert metrics.loc[name, "rmse"] == pytest.approx(value, rel=0.25)


@pytest.mark.slow
def test_rmse_falls_with_sample_size():
    rmse = [
        run_monte_carlo(SimConfig(n=n, T=10, seed=0), Q=200, progress=False, n_jobs=-1).metrics.set_index("parameter")["rmse"]
        for n in (100, 200, 400)
    ]
    for name in ("beta_M", "beta_K", "rho0", "rho1"):
        assert rmse[0][name] > rmse[1][name] > rmse[2][name]


@pytest.mark.slow
def test_sample_splitting_is_much_worse():
    config = SimConfig(n=200, T=10, seed=0)
    kernel = run_monte_carlo(config, Q=200, progress=False, n_jobs=-1).metrics.set_index("parameter")
    split = run_monte_carlo(config, Q=200, estimator="sample-splitting", progress=False, n_jobs=-1)
    split = split.metrics.set_index("parameter")
    assert split.loc["beta_K", "rmse"] >= 2 * kernel.loc["beta_K", "rmse"]


@pytest.mark.slow
@pytest.mark.parametrize("invariant_truth, low, high", [(False, 0.80, 0.98), (True, 0.88, 0.99)])
def test_bootstrap_coverage(invariant_truth, low, high):
    config = SimConfig(n=200, T=10, seed=0, invariant_truth=invariant_truth)
    report = coverage_study(config, Q=100, B=199, progress=False, n_jobs=-1)
    for fid in report.functionals:
        if report.evaluated[fid]:
            assert low <= report.coverage[fid] <= high


@pytest.mark.slow
def test_invariance_test_size():
    report = rejection_rate(SimConfig(n=200, T=10, seed=0, invariant_truth=True), 200, B=199, progress=False, n_jobs=-1)
    assert 0.02 <= report.rate <= 0.10


@pytest.mark.slow
def test_invariance_test_power():
    report = rejection_rate(SimConfig(n=400, T=10, seed=0), 200, B=199, progress=False, n_jobs=-1)
    assert report.rate >= 0.8
