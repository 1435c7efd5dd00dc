"""
Weighted estimation engines
===========================

weighted_mean           - local-constant kernel estimate
solve_weighted_linear   - sqrt(w)-scaled least squares via SVD (gelsd)
fit_profiled_nls        - second-step NLS profiled over rho1 (golden-section on a bracket)
fit_gauss_newton        - Levenberg-Marquardt on weighted residuals with analytic Jacobian
"""

import logging
from dataclasses import dataclass, field
from typing import Protocol, Tuple

import numpy as np
from scipy.linalg import lstsq, svdvals
from scipy.optimize import least_squares, minimize_scalar

from locprod.errors import (
    InsufficientDataError,
    NumericalError,
    SingularDesignError,
    ZeroWeightError,
)
from locprod.tools.residuals import ProxiedProductionModel

logger = logging.getLogger(__name__)

RHO1_BRACKET = (-0.2, 1.2)
GRID_STEP = 0.05
GRADIENT_TOL = 1e-8
# golden-section refinement resolves rho1 only to about sqrt(machine eps)
PROFILE_GRADIENT_TOL = 1e-6


class ResidualModel(Protocol):
    n_params: int

    def residuals(self, theta: np.ndarray) -> np.ndarray: ...

    def jacobian(self, theta: np.ndarray) -> np.ndarray: ...


@dataclass
class SolverReport:
    """Outcome of one weighted fit"""
    estimate: np.ndarray
    rss: float
    iterations: int
    converged: bool
    condition: float = float("nan")
    gradient_norm: float = float("nan")
    message: str = ""
    extra: dict = field(default_factory=dict)


# =============================================================================
# LINEAR
# =============================================================================

def _check_weights(weights: np.ndarray, n: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise NumericalError(f"weights have shape {w.shape}, expected ({n},)")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise NumericalError("weights must be finite and nonnegative")
    return w


def weighted_mean(values, weights) -> float:
    """sum(w v) / sum(w)"""
    values = np.asarray(values, dtype=float)
    w = _check_weights(weights, values.size)
    total = w.sum()
    if total <= 0:
        raise ZeroWeightError("total kernel weight is zero")
    return float(np.dot(w, values) / total)


def _scaled_lstsq(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, float]:
    n_params = a.shape[1]
    s = svdvals(a) if a.size else np.zeros(0)
    tol = max(a.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    condition = float(s[0] / s[-1]) if s.size and s[-1] > 0 else float("inf")
    if rank < n_params:
        raise SingularDesignError(condition, rank, n_params)
    coef, _, _, _ = lstsq(a, b, lapack_driver="gelsd")
    return coef, condition


def solve_weighted_linear(design, response, weights) -> np.ndarray:
    """
    Minimize sum_i w_i (response_i - design_i . beta)^2.

    Raises:
        SingularDesignError: the sqrt(w)-scaled design is rank deficient
    """
    design = np.asarray(design, dtype=float)
    response = np.asarray(response, dtype=float)
    sw = np.sqrt(_check_weights(weights, response.size))
    coef, _ = _scaled_lstsq(design * sw[:, None], response * sw)
    return coef


def weighted_rss(residuals: np.ndarray, weights: np.ndarray) -> float:
    return float(np.dot(weights, residuals ** 2))


def _gradient_norm(jac: np.ndarray, resid: np.ndarray, w: np.ndarray, scale: float) -> float:
    """|J'Wr| / (|sqrt(W)J| max(|sqrt(W)r|, 1e-8 scale)), invariant to the scale of w

    ``scale`` is the weighted norm of the response, so exact fits do not divide rounding noise by itself.
    """
    sw = np.sqrt(w)
    sj = jac * sw[:, None]
    sr = resid * sw
    grad = sj.T @ sr
    denom = np.linalg.norm(sj) * max(np.linalg.norm(sr), 1e-8 * (1.0 + scale))
    if denom <= np.finfo(float).tiny:
        return 0.0
    return float(np.linalg.norm(grad) / denom)


# =============================================================================
# PROFILED NLS
# =============================================================================

class _Profile:
    """Concentrated weighted RSS over rho1"""

    def __init__(self, model: ProxiedProductionModel, weights: np.ndarray):
        self.model = model
        self.w = weights
        self.sw = np.sqrt(weights)
        self.evaluations = 0

    def solve(self, rho1: float) -> Tuple[np.ndarray, float, float]:
        self.evaluations += 1
        design, offset = self.model.design_at(rho1)
        inner, condition = _scaled_lstsq(
            design * self.sw[:, None], (self.model.response - offset) * self.sw
        )
        resid = self.model.response - offset - design @ inner
        return inner, weighted_rss(resid, self.w), condition

    def __call__(self, rho1: float) -> float:
        try:
            _, rss, _ = self.solve(rho1)
        except SingularDesignError:
            return np.inf
        return rss


def fit_profiled_nls(
    model: ProxiedProductionModel,
    weights,
    bracket: Tuple[float, float] = RHO1_BRACKET,
    tol: float = 1e-10,
) -> SolverReport:
    """
    Weighted NLS of the second-step model, concentrating out the linear block.

    A coarse grid over the bracket locates the basin; golden-section search refines it.
    A minimum on the bracket edge is returned with converged=False.

    Args:
        model: second-step residual model
        weights: per-row kernel weights
        bracket: rho1 search interval
        tol: rho1 tolerance of the refinement
    """
    w = _check_weights(weights, model.n_rows)
    if int(np.count_nonzero(w)) < model.n_params:
        raise InsufficientDataError(
            f"{int(np.count_nonzero(w))} weighted rows for {model.n_params} parameters",
            rows=int(np.count_nonzero(w)), n_params=model.n_params,
        )
    lo, hi = bracket
    profile = _Profile(model, w)
    grid = np.linspace(lo, hi, int(round((hi - lo) / GRID_STEP)) + 1)
    values = np.array([profile(r) for r in grid])
    if not np.any(np.isfinite(values)):
        # every rho1 hits the same rank deficiency; surface it
        profile.solve(float(grid[len(grid) // 2]))
        raise NumericalError("profile objective is not finite anywhere on the bracket")

    i = int(np.nanargmin(values))
    left, right = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    on_edge = i == 0 or i == len(grid) - 1
    if not on_edge and values[i] < values[i - 1] and values[i] < values[i + 1]:
        res = minimize_scalar(profile, bracket=(left, grid[i], right), method="golden", tol=tol)
    else:
        res = minimize_scalar(profile, bounds=(left, right), method="bounded", options={"xatol": tol})
    rho1 = float(res.x)
    success = bool(res.get("success", True))
    if not np.isfinite(res.fun) or res.fun > values[i]:
        rho1 = float(grid[i])

    inner, rss, condition = profile.solve(rho1)
    if not np.isfinite(rss):
        raise NumericalError("profile objective is not finite at the optimum")
    theta = model.assemble(rho1, inner)
    at_edge = on_edge and min(abs(rho1 - lo), abs(rho1 - hi)) < 1e-6
    gnorm = _gradient_norm(
        model.jacobian(theta), model.residuals(theta), w, float(np.linalg.norm(profile.sw * model.response))
    )

    message = "converged"
    if at_edge:
        message = f"rho1 at bracket edge {rho1:.4f}"
    elif not success:
        message = "rho1 refinement failed"
    elif gnorm > PROFILE_GRADIENT_TOL:
        message = f"gradient norm {gnorm:.2e} above tolerance"
    return SolverReport(
        estimate=theta,
        rss=rss,
        iterations=profile.evaluations,
        converged=message == "converged",
        condition=condition,
        gradient_norm=gnorm,
        message=message,
    )


# =============================================================================
# LEVENBERG-MARQUARDT
# =============================================================================

def fit_gauss_newton(
    model: ResidualModel,
    init,
    weights,
    max_iter: int = 200,
    tol: float = 1e-10,
) -> SolverReport:
    """
    Damped Gauss-Newton (MINPACK Levenberg-Marquardt) on sqrt(w)-scaled residuals.

    Divergence or iteration exhaustion returns converged=False with the last iterate.
    """
    init = np.asarray(init, dtype=float)
    w = _check_weights(weights, model.residuals(init).size)
    sw = np.sqrt(w)
    if sw.size < init.size:
        raise InsufficientDataError(
            f"{sw.size} rows for {init.size} parameters", rows=int(sw.size), n_params=int(init.size)
        )

    def fun(theta):
        return sw * model.residuals(theta)

    def jac(theta):
        return model.jacobian(theta) * sw[:, None]

    start = fun(init)
    if not np.all(np.isfinite(start)):
        raise NumericalError("residuals are not finite at the initial point")
    res = least_squares(
        fun, init, jac=jac, method="lm",
        ftol=tol, xtol=tol, gtol=GRADIENT_TOL, max_nfev=max_iter * (init.size + 1),
    )
    theta = res.x
    resid = model.residuals(theta)
    rss = weighted_rss(resid, w)
    iterations = int(res.njev or res.nfev)
    finite = np.isfinite(rss) and np.all(np.isfinite(theta))
    converged = bool(res.status > 0) and finite and iterations <= max_iter
    s = svdvals(res.jac) if finite else np.zeros(0)
    condition = float(s[0] / s[-1]) if s.size and s[-1] > 0 else float("inf")
    gnorm = _gradient_norm(model.jacobian(theta), resid, w, float(np.linalg.norm(start))) if finite else float("nan")
    return SolverReport(
        estimate=theta,
        rss=rss,
        iterations=iterations,
        converged=converged,
        condition=condition,
        gradient_norm=gnorm,
        message=res.message if converged else f"not converged: {res.message}",
    )


def polish(model: ResidualModel, report: SolverReport, weights, max_iter: int = 200) -> SolverReport:
    """Gauss-Newton refinement started from a previous report; keeps the better of the two"""
    refined = fit_gauss_newton(model, report.estimate, weights, max_iter=max_iter)
    if refined.converged and refined.rss <= report.rss * (1 + 1e-12):
        refined.extra.update(report.extra, initial_rss=report.rss)
        return refined
    logger.debug(f"Gauss-Newton polish kept the initial point ({refined.message})")
    return report
