"""
Two-step locally weighted estimator
===================================

Step 1 - material share equation, local-constant kernel fit around every unique location:
    v = ln[beta_M(s) theta] - eta        (translog: v = ln[(a0 + aMM m + aKM k + aLM l)] - eta)
    theta = mean(exp(eta_hat)), beta_M(s) = exp(b_M(s)) / theta

Step 2 - proxied production function on the lagged rows, locally weighted NLS:
    y* = F(x_t)'b + rho0 + rho1 [nu*_{t-1} - F(x_{t-1})'b] + rho2'G_{t-1} + (zeta + eta)

Productivity - omega = y - F(x)'b - material terms - eta_hat

The location-invariant baseline runs the same code with one global target and unit
weights, then broadcasts the single coefficient row to every location.

Usage:
    fit = full_fit(panel, h1=520, h2=340)
    cv = cross_validate(panel, step=1, h_grid=[100, 200, 400])
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from locprod.errors import BandwidthError, ConfigError, InsufficientDataError, LocProdError
from locprod.ingest import build_lagged_rows
from locprod.models.panel import PanelDataset
from locprod.models.results import (
    CrossValidationResult,
    EstimationResult,
    FirstStepResult,
    ProductivitySeries,
    SecondStepResult,
    TechnologySpec,
)
from locprod.tools.kernel import KernelSpec, WeightVector, kernel_weights
from locprod.tools.residuals import (
    MaterialShareModel,
    ProxiedProductionModel,
    fixed_input_basis,
    material_basis,
    material_terms,
)
from locprod.tools.solver import (
    SolverReport,
    fit_gauss_newton,
    fit_profiled_nls,
    polish,
    weighted_mean,
)

logger = logging.getLogger(__name__)


# =============================================================================
# WEIGHT PLANS
# =============================================================================

class WeightPlan:
    """Targets and observation weights for one estimation step.

    With ``h`` set, one kernel-weighted target per unique location; with ``h=None``, a
    single global target with unit weights (location-invariant estimator).
    """

    def __init__(self, panel: PanelDataset, h: Optional[int] = None):
        self.panel = panel
        self.spec = None if h is None else KernelSpec(h=h)
        if h is not None and h > len(panel):
            raise BandwidthError(f"neighbor count h={h} exceeds {len(panel)} observations", h=h, n=len(panel))

    @property
    def is_global(self) -> bool:
        return self.spec is None

    @property
    def n_targets(self) -> int:
        return 1 if self.is_global else self.panel.n_locations

    def weights(self, j: int, holdout: Optional[int] = None) -> WeightVector:
        if self.is_global:
            return WeightVector(target=(), bandwidth=float("inf"), weights=np.ones(len(self.panel)), degenerate=True)
        return kernel_weights(self.panel.locations[j], self.panel, self.spec, holdout=holdout)

    def expand(self, rows: np.ndarray) -> np.ndarray:
        """Per-target rows -> per-location rows"""
        if self.is_global:
            return np.repeat(rows[:1], self.panel.n_locations, axis=0)
        return rows


def _tech(panel: PanelDataset, tech: Optional[TechnologySpec]) -> TechnologySpec:
    tech = tech or TechnologySpec.for_panel(panel)
    if tech.has_labor != panel.has_labor or tech.control_dimension != panel.control_dimension:
        raise ConfigError(
            f"technology spec (labor={tech.has_labor}, controls={tech.control_dimension}) does not match "
            f"the panel (labor={panel.has_labor}, controls={panel.control_dimension})"
        )
    return tech


# =============================================================================
# STEP 1
# =============================================================================

def _fit_share(share: np.ndarray, design: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, Optional[SolverReport], str]:
    """Translog share equation at one target"""
    nan = np.full(design.shape[1], np.nan)
    init = np.zeros(design.shape[1])
    try:
        init[0] = np.exp(weighted_mean(share, weights))
        report = fit_gauss_newton(MaterialShareModel(share, design), init, weights)
    except LocProdError as e:
        return nan, None, e.message
    if not report.converged:
        return nan, report, report.message
    return report.estimate, report, ""


def fitted_share(panel: PanelDataset, first: FirstStepResult) -> np.ndarray:
    """v + eta_hat: ln of the theta-scaled material elasticity at each observation"""
    scaled = first.scaled[panel.location_index]
    return _ln_scaled_elasticity(first.tech, scaled, panel.k, panel.l, panel.m)


def _ln_scaled_elasticity(tech: TechnologySpec, scaled_rows: np.ndarray, k, l, m) -> np.ndarray:
    """ln[theta x material elasticity] with per-row scaled coefficients"""
    if not tech.is_translog:
        return scaled_rows[:, 0]
    z = np.sum(scaled_rows * material_basis(k, l, m), axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(z > 0, np.log(np.where(z > 0, z, 1.0)), np.nan)


def step1(
    panel: PanelDataset,
    h1: Optional[int],
    tech: Optional[TechnologySpec] = None,
    n_jobs: int = 1,
    plan: Optional[WeightPlan] = None,
) -> FirstStepResult:
    """
    Local-constant share equation, theta recovery, y* and nu*.

    Args:
        panel: validated panel
        h1: neighbor count (ignored when a global plan is passed)
        tech: technology; defaults to Cobb-Douglas with the panel's inputs and controls
        n_jobs: joblib workers for per-location fits
        plan: weight plan override

    Returns:
        FirstStepResult
    """
    tech = _tech(panel, tech)
    plan = plan or WeightPlan(panel, h1)
    lagged = build_lagged_rows(panel)
    idx = panel.location_index
    logger.info(f"[step 1] {tech.form.value} share equation at {plan.n_targets} target(s), h1={h1}")

    vectors = [plan.weights(j) for j in range(plan.n_targets)]
    bandwidths = plan.expand(np.array([w.bandwidth for w in vectors]))
    reports: List[Optional[SolverReport]] = []
    if tech.is_translog:
        design = material_basis(panel.k, panel.l, panel.m)
        fits = Parallel(n_jobs=n_jobs)(delayed(_fit_share)(panel.v, design, w.weights) for w in vectors)
        scaled = plan.expand(np.vstack([f[0] for f in fits]))
        reports = [f[1] for f in fits]
        for j, (_, _, reason) in enumerate(fits):
            if reason:
                logger.warning(f"[step 1] location {j} flagged: {reason}")
        if plan.is_global:
            reports = reports * panel.n_locations
    else:
        scaled = plan.expand(np.array([[weighted_mean(panel.v, w.weights)] for w in vectors]))

    ln_own = _ln_scaled_elasticity(tech, scaled[idx], panel.k, panel.l, panel.m)
    eta_hat = ln_own - panel.v
    flags = ~np.all(np.isfinite(scaled), axis=1)
    # a location whose fitted elasticity leaves the log domain at its own rows is unusable
    bad_rows = ~np.isfinite(eta_hat)
    if bad_rows.any():
        flags[np.unique(idx[bad_rows])] = True
        eta_hat = np.where(flags[idx], np.nan, eta_hat)
    usable = np.isfinite(eta_hat)
    if not usable.any():
        raise InsufficientDataError("first step failed at every location")
    if flags.any():
        logger.warning(f"[step 1] {int(flags.sum())} location(s) flagged and excluded")

    theta = float(np.mean(np.exp(eta_hat[usable])))
    coefficients = scaled / theta if tech.is_translog else np.exp(scaled) / theta
    coefficients = np.where(flags[:, None], np.nan, coefficients)

    own = coefficients[idx]
    y_star = panel.y - material_terms(own, panel.k, panel.l, panel.m)

    cur, lag = lagged.current, lagged.lagged
    l_lag = None if panel.l is None else panel.l[lag]
    lag_coef = coefficients[idx[cur]]
    ln_lag = _ln_scaled_elasticity(tech, scaled[idx[cur]], panel.k[lag], l_lag, panel.m[lag])
    nu_star = (
        panel.price_ratio[lag] - ln_lag + panel.m[lag]
        - material_terms(lag_coef, panel.k[lag], l_lag, panel.m[lag])
    )
    logger.info(f"[step 1] theta = {theta:.6f}")
    return FirstStepResult(
        tech=tech,
        scaled=scaled,
        coefficients=coefficients,
        theta=theta,
        eta_hat=eta_hat,
        y_star=y_star,
        nu_star=nu_star,
        lagged=lagged,
        bandwidths=bandwidths,
        flags=flags,
        reports=reports,
    )


# =============================================================================
# STEP 2
# =============================================================================

def second_step_model(panel: PanelDataset, first: FirstStepResult) -> Tuple[ProxiedProductionModel, np.ndarray]:
    """Residual model over the lagged rows with finite y* and nu*, and the mask selecting them"""
    cur, lag = first.lagged.current, first.lagged.lagged
    form = first.tech.form
    l_cur = None if panel.l is None else panel.l[cur]
    l_lag = None if panel.l is None else panel.l[lag]
    response = first.y_star[cur]
    valid = np.isfinite(response) & np.isfinite(first.nu_star)
    model = ProxiedProductionModel(
        response=response[valid],
        basis_current=fixed_input_basis(panel.k[cur], l_cur, form)[valid],
        basis_lagged=fixed_input_basis(panel.k[lag], l_lag, form)[valid],
        nu_lagged=first.nu_star[valid],
        controls_lagged=panel.controls[lag][valid],
    )
    return model, valid


def _fit_second(model: ProxiedProductionModel, weights: np.ndarray, translog: bool) -> Tuple[Optional[SolverReport], str]:
    try:
        report = fit_profiled_nls(model, weights)
        if translog:
            report = polish(model, report, weights)
    except LocProdError as e:
        return None, e.message
    return report, ""


def _row_weights(plan: WeightPlan, j: int, rows: np.ndarray, holdout: Optional[int] = None) -> np.ndarray:
    return plan.weights(j, holdout=holdout).weights[rows]


def step2(
    panel: PanelDataset,
    first: FirstStepResult,
    h2: Optional[int],
    tech: Optional[TechnologySpec] = None,
    n_jobs: int = 1,
    plan: Optional[WeightPlan] = None,
) -> SecondStepResult:
    """
    Locally weighted NLS of the proxied production function at every unique location.

    Cobb-Douglas uses the profiled solver; translog polishes the profiled solution with
    Levenberg-Marquardt. Solver failures flag the location (NaN coefficients).
    """
    tech = _tech(panel, tech or first.tech)
    plan = plan or WeightPlan(panel, h2)
    if len(first.lagged) == 0:
        raise InsufficientDataError("no lagged rows: no firm is observed in two consecutive periods")
    model, valid = second_step_model(panel, first)
    rows = first.lagged.current[valid]
    logger.info(f"[step 2] {model.n_rows} lagged rows, {plan.n_targets} target(s), h2={h2}")

    vectors = [plan.weights(j) for j in range(plan.n_targets)]
    fits = Parallel(n_jobs=n_jobs)(
        delayed(_fit_second)(model, w.weights[rows], tech.is_translog) for w in vectors
    )
    names = tech.second_step_names
    coef = np.full((plan.n_targets, len(names)), np.nan)
    reports: List[Optional[SolverReport]] = []
    reasons: List[str] = []
    for j, (report, reason) in enumerate(fits):
        reports.append(report)
        if report is None:
            logger.warning(f"[step 2] location {j} flagged: {reason}")
            reasons.append(reason)
            continue
        coef[j] = report.estimate
        reasons.append("" if report.converged else report.message)
    not_converged = sum(1 for r in reports if r is not None and not r.converged)
    if not_converged:
        logger.warning(f"[step 2] {not_converged} location(s) returned without convergence")

    coefficients = plan.expand(coef)
    if plan.is_global:
        reports = reports * panel.n_locations
        reasons = reasons * panel.n_locations
    flags = ~np.all(np.isfinite(coefficients), axis=1)

    n_lag = len(first.lagged)
    fitted = np.full(n_lag, np.nan)
    residuals = np.full(n_lag, np.nan)
    fitted[valid] = model.fitted_rowwise(coefficients[panel.location_index[rows]])
    residuals[valid] = model.response - fitted[valid]
    return SecondStepResult(
        tech=tech,
        coefficients=coefficients,
        residuals=residuals,
        fitted=fitted,
        bandwidths=plan.expand(np.array([w.bandwidth for w in vectors])),
        flags=flags,
        reports=reports,
        reasons=reasons,
    )


# =============================================================================
# PRODUCTIVITY / COMPOSITION
# =============================================================================

def recover_productivity(panel: PanelDataset, first: FirstStepResult, second: SecondStepResult) -> ProductivitySeries:
    """omega = y - F(x)'b(S) - material terms(S) - eta_hat"""
    idx = panel.location_index
    basis = fixed_input_basis(panel.k, panel.l, first.tech.form)
    b = second.coefficients[idx, :basis.shape[1]]
    omega = (
        panel.y
        - np.sum(basis * b, axis=1)
        - material_terms(first.coefficients[idx], panel.k, panel.l, panel.m)
        - first.eta_hat
    )
    return ProductivitySeries(omega=omega)


def full_fit(
    panel: PanelDataset,
    h1: int,
    h2: int,
    tech: Optional[TechnologySpec] = None,
    n_jobs: int = 1,
) -> EstimationResult:
    """Both steps and productivity recovery"""
    tech = _tech(panel, tech)
    first = step1(panel, h1, tech, n_jobs=n_jobs)
    second = step2(panel, first, h2, tech, n_jobs=n_jobs)
    return EstimationResult(
        panel=panel,
        tech=tech,
        h1=h1,
        h2=h2,
        first=first,
        second=second,
        productivity=recover_productivity(panel, first, second),
    )


def estimate_invariant(panel: PanelDataset, tech: Optional[TechnologySpec] = None) -> EstimationResult:
    """Location-invariant estimator: sample-mean first step, unweighted second-step NLS"""
    tech = _tech(panel, tech)
    plan = WeightPlan(panel, None)
    first = step1(panel, None, tech, plan=plan)
    second = step2(panel, first, None, tech, plan=plan)
    return EstimationResult(
        panel=panel,
        tech=tech,
        h1=None,
        h2=None,
        first=first,
        second=second,
        productivity=recover_productivity(panel, first, second),
        invariant=True,
    )


# =============================================================================
# CROSS-VALIDATION
# =============================================================================

def _cv_share_fold(
    share: np.ndarray,
    design: Optional[np.ndarray],
    weights: np.ndarray,
    members: np.ndarray,
) -> Tuple[float, int]:
    """Squared prediction error of v at the held-out location"""
    held = share[members]
    if design is None:
        prediction = weighted_mean(share, weights)
        return float(np.sum((held - prediction) ** 2)), int(held.size)
    if np.count_nonzero(weights) < design.shape[1]:
        return np.nan, 0
    a, _, reason = _fit_share(share, design, weights)
    if reason:
        return np.nan, 0
    z = design[members] @ a
    if np.any(z <= 0):
        return np.nan, 0
    return float(np.sum((held - np.log(z)) ** 2)), int(held.size)


def _cv_second_fold(
    model: ProxiedProductionModel,
    weights: np.ndarray,
    members: np.ndarray,
    translog: bool,
) -> Tuple[float, int]:
    """Squared prediction error of y* at the held-out location's lagged rows"""
    if not members.any():
        return 0.0, 0
    if np.count_nonzero(weights) < model.n_params:
        return np.nan, 0
    report, _ = _fit_second(model, weights, translog)
    if report is None:
        return np.nan, 0
    resid = model.residuals(report.estimate)[members]
    return float(np.sum(resid ** 2)), int(members.sum())


def choose_bandwidth(h_grid: Sequence[int], scores: Sequence[float]) -> int:
    """Smallest h among the candidates with the lowest finite score"""
    grid = np.asarray(h_grid, dtype=np.int64)
    scores = np.asarray(scores, dtype=float)
    finite = np.isfinite(scores)
    if not np.any(finite):
        raise InsufficientDataError("no bandwidth candidate could be evaluated")
    best = np.min(scores[finite])
    return int(np.min(grid[finite & (scores == best)]))


def cross_validate(
    panel: PanelDataset,
    step: int,
    h_grid: Sequence[int],
    tech: Optional[TechnologySpec] = None,
    h1: Optional[int] = None,
    first: Optional[FirstStepResult] = None,
    n_jobs: int = 1,
) -> CrossValidationResult:
    """
    Leave-one-location-out cross-validation of the neighbor count.

    Each unique location is predicted from fits that give its observations zero weight
    and exclude them from the bandwidth count. The score is the mean squared prediction
    error over evaluated observations; ties go to the smaller h. Step 2 freezes the
    first step at ``h1`` (or a supplied ``first``).

    Returns:
        CrossValidationResult
    """
    if step not in (1, 2):
        raise ConfigError(f"cross-validation step must be 1 or 2, got {step}")
    tech = _tech(panel, tech)
    grid = np.unique(np.asarray(list(h_grid), dtype=np.int64))
    if grid.size == 0:
        raise ConfigError("empty bandwidth grid")
    if grid[0] < 1 or grid[-1] > len(panel):
        raise BandwidthError(f"bandwidth grid must lie in [1, {len(panel)}]", grid=grid.tolist())

    idx = panel.location_index
    if step == 2:
        if first is None:
            if h1 is None:
                raise ConfigError("step-2 cross-validation needs h1 or a first-step result")
            first = step1(panel, h1, tech, n_jobs=n_jobs)
        model, valid = second_step_model(panel, first)
        rows = first.lagged.current[valid]
        row_location = idx[rows]
    design = material_basis(panel.k, panel.l, panel.m) if tech.is_translog else None

    scores, evaluated, skipped = [], [], []
    for h in grid:
        plan = WeightPlan(panel, int(h))
        tasks, n_skip = [], 0
        for j in range(panel.n_locations):
            try:
                w = plan.weights(j, holdout=j).weights
            except BandwidthError:
                n_skip += 1
                continue
            if step == 1:
                tasks.append(delayed(_cv_share_fold)(panel.v, design, w, idx == j))
            else:
                tasks.append(delayed(_cv_second_fold)(model, w[rows], row_location == j, tech.is_translog))
        folds = Parallel(n_jobs=n_jobs)(tasks)
        failed = sum(1 for err, _ in folds if not np.isfinite(err))
        n_skip += failed
        total = sum(err for err, _ in folds if np.isfinite(err))
        count = sum(n for err, n in folds if np.isfinite(err))
        if n_skip:
            logger.warning(f"[cv] step {step}, h={h}: skipped {n_skip} location(s) with too little data")
        scores.append(total / count if count else np.nan)
        evaluated.append(count)
        skipped.append(n_skip)
        logger.info(f"[cv] step {step}, h={h}: score {scores[-1]:.6g} over {count} observations")

    scores_arr = np.array(scores)
    chosen = choose_bandwidth(grid, scores_arr)
    logger.info(f"[cv] step {step}: chosen h = {chosen}")
    return CrossValidationResult(
        step=step,
        h_grid=grid,
        scores=scores_arr,
        evaluated=np.array(evaluated),
        skipped=np.array(skipped),
        h=chosen,
        h1=h1 if step == 2 else None,
    )
