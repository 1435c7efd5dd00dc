import numpy as np
import pytest
from numpy.testing import assert_allclose

from locprod.errors import InsufficientDataError, SingularDesignError, ZeroWeightError
from locprod.tools.residuals import MaterialShareModel, ProxiedProductionModel, material_basis
from locprod.tools.solver import (
    GRADIENT_TOL,
    PROFILE_GRADIENT_TOL,
    fit_gauss_newton,
    fit_profiled_nls,
    solve_weighted_linear,
    weighted_mean,
    weighted_rss,
)


def make_model(seed: int, n: int = 60, rho1: float = 0.7, noise: float = 0.05):
    rng = np.random.default_rng(seed)
    beta_K, rho0 = 0.3, 0.5
    k_cur = rng.normal(3.0, 1.0, n)
    k_lag = rng.normal(3.0, 1.0, n)
    omega_lag = rng.normal(1.0, 0.3, n)
    nu_lag = beta_K * k_lag + omega_lag
    response = beta_K * k_cur + rho0 + rho1 * omega_lag + rng.normal(0.0, noise, n)
    model = ProxiedProductionModel(response, k_cur[:, None], k_lag[:, None], nu_lag)
    weights = rng.uniform(0.1, 1.0, n)
    return model, weights


def central_difference(fun, theta, step=1e-6):
    cols = []
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = step
        cols.append((fun(theta + e) - fun(theta - e)) / (2 * step))
    return np.column_stack(cols)


def profile_rss(model, weights, rho1):
    design, offset = model.design_at(rho1)
    inner = solve_weighted_linear(design, model.response - offset, weights)
    return weighted_rss(model.response - offset - design @ inner, weights)


# =============================================================================
# LINEAR
# =============================================================================

def test_weighted_linear_matches_normal_equations():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(30), rng.normal(size=30)])
    y = X @ [1.0, 2.0] + rng.normal(0, 0.1, 30)
    w = rng.uniform(0.5, 2.0, 30)
    expected = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * y))
    assert_allclose(solve_weighted_linear(X, y, w), expected, rtol=1e-10)


def test_rank_deficient_design_raises():
    x = np.arange(10.0)
    X = np.column_stack([x, 2 * x])
    with pytest.raises(SingularDesignError) as err:
        solve_weighted_linear(X, x, np.ones(10))
    assert err.value.rank == 1


def test_weighted_mean_rejects_zero_weights():
    assert weighted_mean([1.0, 3.0], [1.0, 1.0]) == 2.0
    with pytest.raises(ZeroWeightError):
        weighted_mean([1.0, 3.0], [0.0, 0.0])


# =============================================================================
# JACOBIANS
# =============================================================================

def test_second_step_jacobian_matches_finite_differences():
    model, _ = make_model(1)
    theta = np.array([0.25, 0.4, 0.6])
    assert_allclose(model.jacobian(theta), central_difference(model.residuals, theta), rtol=1e-5, atol=1e-7)


def test_share_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    k, l, m = rng.normal(3, 0.5, 40), rng.normal(2, 0.5, 40), rng.normal(4, 0.5, 40)
    design = material_basis(k, l, m)
    a = np.array([0.5, 0.02, -0.01, 0.01])
    share = np.log(design @ a) + rng.normal(0, 0.05, 40)
    model = MaterialShareModel(share, design)
    assert_allclose(model.jacobian(a), central_difference(model.residuals, a), rtol=1e-5, atol=1e-7)


# =============================================================================
# PROFILED NLS / GAUSS-NEWTON
# =============================================================================

@pytest.mark.parametrize("seed", range(20))
def test_profiled_matches_dense_grid(seed):
    model, weights = make_model(seed, n=40)
    report = fit_profiled_nls(model, weights)
    grid = np.arange(-0.2, 1.2 + 1e-9, 1e-3)
    values = np.array([profile_rss(model, weights, r) for r in grid])
    best = grid[int(np.argmin(values))]
    assert report.converged
    assert report.rss <= values.min() + 1e-12
    assert abs(report.estimate[2] - best) <= 1e-3


def test_profiled_recovers_noiseless_parameters():
    model, weights = make_model(3, noise=0.0)
    report = fit_profiled_nls(model, weights)
    assert_allclose(report.estimate, [0.3, 0.5, 0.7], atol=1e-6)


def test_gauss_newton_agrees_with_profiled():
    model, weights = make_model(4)
    profiled = fit_profiled_nls(model, weights)
    gn = fit_gauss_newton(model, profiled.estimate + 0.05, weights)
    assert gn.converged
    assert gn.rss == pytest.approx(profiled.rss, rel=1e-6)
    assert_allclose(gn.estimate, profiled.estimate, atol=1e-5)


def test_converged_reports_meet_gradient_tolerances():
    assert GRADIENT_TOL == 1e-8
    model, weights = make_model(7, n=40)
    profiled = fit_profiled_nls(model, weights)
    assert profiled.converged
    assert profiled.gradient_norm <= PROFILE_GRADIENT_TOL


def test_bracket_edge_is_not_converged():
    model, weights = make_model(5, rho1=1.6, noise=0.01)
    report = fit_profiled_nls(model, weights)
    assert not report.converged
    assert "edge" in report.message
    assert report.estimate[2] == pytest.approx(1.2, abs=1e-6)


def test_too_few_weighted_rows():
    model, weights = make_model(6)
    weights = np.zeros_like(weights)
    weights[:2] = 1.0
    with pytest.raises(InsufficientDataError):
        fit_profiled_nls(model, weights)
