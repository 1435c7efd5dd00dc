"""
Synthetic panels and Monte Carlo studies
========================================

Data-generating process (capital and materials, one-dimensional locations):

    y = beta_K(S) k + beta_M(S) m + omega + eta,       eta ~ N(0, sigma_eta^2)
    omega_t = rho0(S) + rho1 omega_{t-1} + zeta,       omega_1 = rho0(S)
    K_t = K_{t-1}^0.8 exp(0.1 omega_{t-1}) + (1 - delta) K_{t-1}
    M = [beta_M(S) K^beta_K(S) exp(omega)]^(1 / (1 - beta_M(S)))

Materials are priced at theta = exp(sigma_eta^2 / 2) relative to output, so the
observed log share is v = ln[beta_M(S) theta] - eta.

Simulation q draws from numpy.random.default_rng([seed, q]); firm locations are
redrawn every simulation.

Usage:
    sim = generate_panel(SimConfig(n=200, seed=3))
    report = run_monte_carlo(SimConfig(n=200), Q=200, estimator="kernel")
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from locprod.errors import ConfigError, LocProdError, MonteCarloFailure
from locprod.estimator import estimate_invariant, full_fit
from locprod.inference import invariance_test, percentile_ci, wild_bootstrap
from locprod.ingest import derive_share
from locprod.models.config import SimConfig
from locprod.models.panel import PanelDataset
from locprod.models.results import TechnologySpec

logger = logging.getLogger(__name__)

ESTIMATORS = ("kernel", "sample-splitting")
MC_PARAMETERS = ("beta_M", "beta_K", "rho0", "rho1")
MAX_FAILURE_SHARE = 0.02


# =============================================================================
# DATA GENERATION
# =============================================================================

@dataclass(eq=False)
class SimulationTruth:
    """Per-observation shocks and true coefficients, aligned with the panel rows"""
    config: SimConfig
    location: np.ndarray
    omega: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray
    delta: np.ndarray

    def coefficient(self, name: str, s=None) -> np.ndarray:
        s = self.location if s is None else np.asarray(s, dtype=float)
        if name == "beta_K":
            return self.config.beta_K(s)
        if name == "beta_M":
            return self.config.beta_M(s)
        if name == "rho0":
            return self.config.rho0(s)
        if name == "rho1":
            return self.config.rho1_at(s)
        raise ConfigError(f"no true value for '{name}'")

    def at_locations(self, panel: PanelDataset) -> pd.DataFrame:
        """True coefficients at every unique location of ``panel``"""
        s = panel.locations[:, 0]
        frame = pd.DataFrame({"location_id": np.arange(s.size), "latitude": s})
        for name in MC_PARAMETERS:
            frame[name] = self.coefficient(name, s)
        return frame


@dataclass(eq=False)
class SimulatedPanel:
    panel: PanelDataset
    truth: SimulationTruth


def material_demand(k_level, omega, beta_K, beta_M) -> np.ndarray:
    """Conditional material demand M = [beta_M K^beta_K e^omega]^(1/(1-beta_M))"""
    k_level = np.asarray(k_level, dtype=float)
    beta_M = np.asarray(beta_M, dtype=float)
    log_m = (np.log(beta_M) + beta_K * np.log(k_level) + omega) / (1.0 - beta_M)
    return np.exp(log_m)


def generate_panel(config: SimConfig, rng: Optional[np.random.Generator] = None) -> SimulatedPanel:
    """
    Simulate one balanced panel of ``config.n`` firms over ``config.T`` periods.

    Args:
        config: data-generating process
        rng: random stream; defaults to default_rng(config.seed)

    Returns:
        SimulatedPanel with the panel and its truth record
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    n, T = config.n, config.T

    s = rng.choice(config.grid, size=n)
    delta = rng.choice(np.asarray(config.depreciation, dtype=float), size=n)
    k0 = rng.uniform(config.k0_low, config.k0_high, size=n)
    eta = rng.normal(0.0, config.sigma_eta, size=(n, T))
    zeta = rng.normal(0.0, config.sigma_zeta, size=(n, T))

    beta_K = config.beta_K(s)[:, None]
    beta_M = config.beta_M(s)[:, None]
    rho0 = config.rho0(s)

    omega = np.empty((n, T))
    omega[:, 0] = rho0
    zeta[:, 0] = np.nan
    for t in range(1, T):
        omega[:, t] = rho0 + config.rho1 * omega[:, t - 1] + zeta[:, t]

    # pre-sample productivity sits at rho0, so period-1 capital follows from K0 like any other period
    capital = np.empty((n, T))
    k_prev, omega_prev = k0, rho0
    for t in range(T):
        investment = k_prev ** config.investment_elasticity * np.exp(config.investment_productivity * omega_prev)
        capital[:, t] = investment + (1.0 - delta) * k_prev
        k_prev, omega_prev = capital[:, t], omega[:, t]

    materials = material_demand(capital, omega, beta_K, beta_M)
    k = np.log(capital)
    m = np.log(materials)
    y = beta_K * k + beta_M * m + omega + eta
    price_ratio = np.full((n, T), np.log(config.theta))
    v = derive_share(m, y, price_ratio)

    firm_id = np.repeat(np.array([f"F{i:05d}" for i in range(n)], dtype=object), T)
    period = np.tile(np.arange(1, T + 1), n)
    location = np.repeat(s, T)
    panel = PanelDataset.from_arrays(
        firm_id=firm_id,
        period=period,
        y=y.ravel(),
        k=k.ravel(),
        l=None,
        m=m.ravel(),
        coords=location,
        v=v.ravel(),
        price_ratio=price_ratio.ravel(),
    )
    truth = SimulationTruth(
        config=config,
        location=location,
        omega=omega.ravel(),
        eta=eta.ravel(),
        zeta=zeta.ravel(),
        delta=np.repeat(delta, T),
    )
    return SimulatedPanel(panel=panel, truth=truth)


def simulation_rng(config: SimConfig, q: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, q])


def simulation_seed(config: SimConfig, q: int) -> int:
    """Root seed for the bootstrap run inside simulation q"""
    return int(np.random.SeedSequence([config.seed, q]).generate_state(1)[0])


# =============================================================================
# SAMPLE-SPLITTING COMPARATOR
# =============================================================================

def _split_fit(panel: PanelDataset, j: int, tech: Optional[TechnologySpec]) -> Tuple[Optional[Dict[str, float]], str]:
    subset = panel.subset(panel.location_index == j)
    try:
        fit = estimate_invariant(subset, tech)
    except LocProdError as e:
        return None, e.message
    if fit.flagged.any():
        reasons = [r for r in fit.second.reasons if r]
        return None, reasons[0] if reasons else "estimation failed"
    return fit.parameters(0), ""


def sample_splitting_estimator(
    panel: PanelDataset,
    tech: Optional[TechnologySpec] = None,
    n_jobs: int = 1,
) -> pd.DataFrame:
    """
    Location-invariant fit on each location's own observations.

    Returns:
        one row per unique location: location_id, coordinates, every coefficient, theta,
        flagged and reason; flagged rows carry NaN coefficients
    """
    tech = tech or TechnologySpec.for_panel(panel)
    names = [*tech.coefficient_names, "theta"]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_split_fit)(panel, j, tech) for j in range(panel.n_locations)
    )
    rows = []
    for j, (params, reason) in enumerate(results):
        coords = dict(zip(("latitude", "longitude"), (float(x) for x in panel.locations[j])))
        values = params if params is not None else {name: np.nan for name in names}
        rows.append({"location_id": j, **coords, **{k: values[k] for k in names}, "flagged": params is None, "reason": reason})
    frame = pd.DataFrame(rows)
    n_flagged = int(frame["flagged"].sum())
    if n_flagged:
        logger.warning(f"[sample-splitting] {n_flagged}/{panel.n_locations} location(s) flagged")
    return frame


# =============================================================================
# MONTE CARLO
# =============================================================================

@dataclass(eq=False)
class MonteCarloReport:
    """Firm-level error metrics, first averaged over firms and then over simulations"""
    estimator: str
    config: SimConfig
    Q: int
    h: Optional[int]
    failures: int
    metrics: pd.DataFrame
    per_simulation: pd.DataFrame = field(repr=False, default=None)

    def frame(self) -> pd.DataFrame:
        out = self.metrics.copy()
        out.insert(0, "T", self.config.T)
        out.insert(0, "n", self.config.n)
        out.insert(0, "estimator", self.estimator)
        out["Q"] = self.Q - self.failures
        return out


def _estimated_at_firms(sim: SimulatedPanel, estimator: str, h: int) -> Tuple[pd.DataFrame, np.ndarray]:
    """Estimated coefficients at each firm's location, plus each firm's first row"""
    panel = sim.panel
    if estimator == "kernel":
        fit = full_fit(panel, h, h)
        surface = pd.DataFrame({name: fit.surface(name) for name in MC_PARAMETERS})
    else:
        surface = sample_splitting_estimator(panel)[list(MC_PARAMETERS)]
    first_rows = np.unique(panel.firm_id, return_index=True)[1]
    return surface.iloc[panel.location_index[first_rows]].reset_index(drop=True), first_rows


def _simulate_once(config: SimConfig, q: int, estimator: str, h: int) -> Tuple[Optional[Dict[str, float]], str]:
    sim = generate_panel(config, simulation_rng(config, q))
    try:
        estimates, first_rows = _estimated_at_firms(sim, estimator, h)
    except LocProdError as e:
        return None, e.message
    record: Dict[str, float] = {"simulation": q}
    for name in MC_PARAMETERS:
        error = estimates[name].to_numpy() - sim.truth.coefficient(name)[first_rows]
        error = error[np.isfinite(error)]
        if error.size == 0:
            return None, f"no firm has a finite estimate of {name}"
        record[f"{name}_bias"] = float(error.mean())
        record[f"{name}_rmse"] = float(np.sqrt(np.mean(error ** 2)))
        record[f"{name}_mae"] = float(np.mean(np.abs(error)))
    return record, ""


def _check_failures(failures: int, Q: int, what: str) -> None:
    if failures > MAX_FAILURE_SHARE * Q:
        raise MonteCarloFailure(
            f"{failures}/{Q} {what} failed (more than {MAX_FAILURE_SHARE:.0%})", failures=failures, Q=Q
        )
    if failures:
        logger.warning(f"[monte-carlo] {failures}/{Q} {what} failed and were dropped")


def run_monte_carlo(
    config: SimConfig,
    Q: int,
    estimator: str = "kernel",
    h: Optional[int] = None,
    n_jobs: int = 1,
    progress: bool = True,
) -> MonteCarloReport:
    """
    Bias, RMSE and MAE of the estimated surfaces at every firm's location.

    Args:
        config: data-generating process
        Q: number of simulated panels
        estimator: "kernel" (both steps at neighbor count h) or "sample-splitting"
        h: neighbor count; defaults to config.bandwidth
        n_jobs: joblib workers over simulations
        progress: show a tqdm bar

    Raises:
        MonteCarloFailure: more than 2% of the simulations failed
    """
    if estimator not in ESTIMATORS:
        raise ConfigError(f"estimator must be one of {ESTIMATORS}, got '{estimator}'")
    if Q < 1:
        raise ConfigError(f"Q must be positive, got {Q}")
    h = h or config.bandwidth
    logger.info(f"[monte-carlo] {estimator}, n={config.n}, T={config.T}, Q={Q}, h={h}")

    results = Parallel(n_jobs=n_jobs)(
        delayed(_simulate_once)(config, q, estimator, h)
        for q in tqdm(range(Q), desc=f"simulate n={config.n}", disable=not progress)
    )
    records = [r for r, _ in results if r is not None]
    for q, (r, reason) in enumerate(results):
        if r is None:
            logger.debug(f"[monte-carlo] simulation {q} failed: {reason}")
    failures = Q - len(records)
    _check_failures(failures, Q, "simulation(s)")

    per_sim = pd.DataFrame(records)
    rows = []
    for name in MC_PARAMETERS:
        rows.append({
            "parameter": name,
            "bias": per_sim[f"{name}_bias"].mean(),
            "rmse": per_sim[f"{name}_rmse"].mean(),
            "mae": per_sim[f"{name}_mae"].mean(),
        })
    metrics = pd.DataFrame(rows)
    for row in rows:
        logger.info(
            f"[monte-carlo] {row['parameter']}: bias {row['bias']:.4f}, rmse {row['rmse']:.4f}, mae {row['mae']:.4f}"
        )
    return MonteCarloReport(
        estimator=estimator,
        config=config,
        Q=Q,
        h=h if estimator == "kernel" else None,
        failures=failures,
        metrics=metrics,
        per_simulation=per_sim,
    )


# =============================================================================
# COVERAGE / POWER
# =============================================================================

@dataclass(eq=False)
class CoverageReport:
    """Empirical coverage of two-sided intervals and rejection frequencies over null offsets"""
    config: SimConfig
    Q: int
    B: int
    alpha: float
    functionals: List[str]
    coverage: Dict[str, float]
    evaluated: Dict[str, int]
    power: pd.DataFrame
    failures: int = 0

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "functional": self.functionals,
            "n": self.config.n,
            "T": self.config.T,
            "coverage": [self.coverage[f] for f in self.functionals],
            "simulations": [self.evaluated[f] for f in self.functionals],
            "B": self.B,
            "level": 1.0 - self.alpha,
        })


def coverage_functionals(locations: Sequence[float]) -> List[str]:
    return ["mean:beta_K", *[f"beta_K@{s:g}" for s in locations]]


def true_value(functional: str, config: SimConfig) -> float:
    """True value of a coverage functional; the mean runs over the whole location grid"""
    if functional == "mean:beta_K":
        return float(np.mean(config.beta_K(config.grid)))
    _, token = functional.split("@", 1)
    return float(config.beta_K(float(token)))


def _coverage_once(
    config: SimConfig,
    q: int,
    B: int,
    alpha: float,
    locations: Sequence[float],
    offsets: Sequence[float],
    h: int,
) -> Tuple[Optional[Dict[str, Tuple[bool, List[bool]]]], str]:
    sim = generate_panel(config, simulation_rng(config, q))
    panel = sim.panel
    populated = set(np.round(panel.locations[:, 0], 9))
    functionals = [
        f for f in coverage_functionals(locations)
        if f == "mean:beta_K" or round(float(f.split("@")[1]), 9) in populated
    ]
    try:
        fit = full_fit(panel, h, h)
        draws = wild_bootstrap(panel, fit, B, simulation_seed(config, q), functionals=functionals)
        outcome = {}
        for fid in functionals:
            ci = percentile_ci(draws.values_for(fid), draws.point_for(fid), alpha, bias_correct=True)
            truth = true_value(fid, config)
            outcome[fid] = (ci.contains(truth), [not ci.contains(truth + d) for d in offsets])
    except LocProdError as e:
        return None, e.message
    return outcome, ""


def coverage_study(
    config: SimConfig,
    Q: int,
    B: int,
    alpha: float = 0.05,
    locations: Sequence[float] = (0.65, 0.75, 0.85),
    offsets: Sequence[float] = (-0.1, -0.05, -0.025, 0.0, 0.025, 0.05, 0.1),
    h: Optional[int] = None,
    n_jobs: int = 1,
    progress: bool = True,
) -> CoverageReport:
    """
    Coverage of bias-corrected two-sided intervals for mean beta_K and beta_K at fixed locations.

    A location functional only counts in simulations where some firm sits at that location.
    The power table gives, per functional and offset d, the share of simulations whose
    interval excludes truth + d.
    """
    if Q < 1 or B < 1:
        raise ConfigError(f"Q and B must be positive, got Q={Q}, B={B}")
    h = h or config.bandwidth
    names = coverage_functionals(locations)
    logger.info(f"[coverage] n={config.n}, Q={Q}, B={B}, alpha={alpha}, h={h}")

    results = Parallel(n_jobs=n_jobs)(
        delayed(_coverage_once)(config, q, B, alpha, locations, offsets, h)
        for q in tqdm(range(Q), desc=f"coverage n={config.n}", disable=not progress)
    )
    outcomes = [o for o, _ in results if o is not None]
    failures = Q - len(outcomes)
    _check_failures(failures, Q, "coverage simulation(s)")

    coverage: Dict[str, float] = {}
    evaluated: Dict[str, int] = {}
    power_rows = []
    for fid in names:
        hits = [o[fid] for o in outcomes if fid in o]
        evaluated[fid] = len(hits)
        coverage[fid] = float(np.mean([c for c, _ in hits])) if hits else float("nan")
        for i, d in enumerate(offsets):
            rate = float(np.mean([r[i] for _, r in hits])) if hits else float("nan")
            power_rows.append({"functional": fid, "offset": d, "rejection_rate": rate, "simulations": len(hits)})
        logger.info(f"[coverage] {fid}: {coverage[fid]:.3f} over {len(hits)} simulation(s)")
    return CoverageReport(
        config=config,
        Q=Q,
        B=B,
        alpha=alpha,
        functionals=names,
        coverage=coverage,
        evaluated=evaluated,
        power=pd.DataFrame(power_rows, columns=["functional", "offset", "rejection_rate", "simulations"]),
        failures=failures,
    )


# =============================================================================
# INVARIANCE TEST STUDY
# =============================================================================

@dataclass(eq=False)
class RejectionReport:
    config: SimConfig
    B: int
    alpha: float
    p_values: np.ndarray
    failures: int

    @property
    def rate(self) -> float:
        return float(np.mean(self.p_values <= self.alpha)) if self.p_values.size else float("nan")

    def to_dict(self) -> Dict[str, float]:
        return {
            "n": self.config.n,
            "T": self.config.T,
            "invariant_truth": self.config.invariant_truth,
            "B": self.B,
            "alpha": self.alpha,
            "replicates": int(self.p_values.size),
            "failures": self.failures,
            "rejection_rate": self.rate,
        }


def _test_once(config: SimConfig, q: int, B: int, h: int) -> float:
    sim = generate_panel(config, simulation_rng(config, q))
    try:
        return invariance_test(sim.panel, h, h, B, simulation_seed(config, q)).p_value
    except LocProdError as e:
        logger.debug(f"[invariance-study] simulation {q} failed: {e.message}")
        return float("nan")


def rejection_rate(
    config: SimConfig,
    replicates: int,
    B: int,
    alpha: float = 0.05,
    h: Optional[int] = None,
    n_jobs: int = 1,
    progress: bool = True,
) -> RejectionReport:
    """Share of simulated panels on which the invariance test rejects at level alpha"""
    h = h or config.bandwidth
    p_values = np.array(Parallel(n_jobs=n_jobs)(
        delayed(_test_once)(config, q, B, h)
        for q in tqdm(range(replicates), desc="invariance test", disable=not progress)
    ))
    ok = np.isfinite(p_values)
    failures = int((~ok).sum())
    _check_failures(failures, replicates, "invariance test(s)")
    report = RejectionReport(config=config, B=B, alpha=alpha, p_values=p_values[ok], failures=failures)
    logger.info(f"[invariance-study] rejection rate {report.rate:.3f} over {report.p_values.size} panel(s)")
    return report
