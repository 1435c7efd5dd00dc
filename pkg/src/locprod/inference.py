"""
Bootstrap inference
===================

Wild residual block bootstrap (one Mammen weight per firm, shared by both estimation
steps), bias-corrected percentile intervals and the bootstrap location-invariance test.

Replicate b draws from numpy.random.default_rng([seed, b]), so draws do not depend on
worker scheduling.

Usage:
    draws = wild_bootstrap(panel, fit, B=199, seed=7, functionals=["mean:beta_K"])
    ci = percentile_ci(draws.values_for("mean:beta_K"), draws.point_for("mean:beta_K"))
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import norm

from locprod.decomposition import decompose, location_means, returns_to_scale, select_benchmark
from locprod.errors import ConfigError, InferenceError, LocProdError
from locprod.estimator import WeightPlan, estimate_invariant, fitted_share, full_fit, recover_productivity, step1, step2
from locprod.models.panel import PanelDataset
from locprod.models.results import EstimationResult, TechnologySpec

logger = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)
MAMMEN_HIGH = (1.0 + SQRT5) / 2.0
MAMMEN_LOW = (1.0 - SQRT5) / 2.0
MAMMEN_P_HIGH = (SQRT5 - 1.0) / (2.0 * SQRT5)
MIN_REPLICATES = 50


# =============================================================================
# MAMMEN WEIGHTS
# =============================================================================

def mammen_weights(rng: np.random.Generator, size: int) -> np.ndarray:
    return np.where(rng.random(size) < MAMMEN_P_HIGH, MAMMEN_HIGH, MAMMEN_LOW)


def mammen_weight(rng: np.random.Generator) -> float:
    """(1+sqrt5)/2 with probability (sqrt5-1)/(2 sqrt5), else (1-sqrt5)/2"""
    return float(mammen_weights(rng, 1)[0])


def firm_codes(panel: PanelDataset) -> Tuple[np.ndarray, int]:
    codes, uniques = pd.factorize(pd.Series(panel.firm_id), sort=True)
    return codes, len(uniques)


# =============================================================================
# FUNCTIONALS
# =============================================================================

@dataclass(frozen=True)
class Functional:
    """Scalar summary of a fit tracked across replicates"""
    id: str
    evaluate: Callable[[EstimationResult], float]


def _location(panel: PanelDataset, token: str) -> int:
    """Location by index ('#3') or by coordinates ('0.65' or '0.65,1.2')"""
    if token.startswith("#"):
        j = int(token[1:])
        if not 0 <= j < panel.n_locations:
            raise ConfigError(f"location index {j} outside [0, {panel.n_locations})")
        return j
    try:
        coords = np.array([float(x) for x in token.split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse location '{token}'") from None
    if coords.size != panel.dim:
        raise ConfigError(f"location '{token}' has {coords.size} coordinates, panel has {panel.dim}")
    gaps = np.max(np.abs(panel.locations - coords), axis=1)
    j = int(np.argmin(gaps))
    if gaps[j] > 1e-9:
        raise ConfigError(f"no panel location at '{token}'")
    return j


def _coefficient_at(name: str, j: int) -> Callable[[EstimationResult], float]:
    return lambda fit: float(fit.surface(name)[j])


def _rts_at(j: int) -> Callable[[EstimationResult], float]:
    def evaluate(fit: EstimationResult) -> float:
        if fit.flagged[j]:
            return float("nan")
        return returns_to_scale(fit.parameters(j), location_means(fit).loc[j].to_dict())
    return evaluate


def _mean_rts(fit: EstimationResult) -> float:
    means = location_means(fit)
    values = [
        returns_to_scale(fit.parameters(j), means.loc[j].to_dict())
        for j in range(fit.panel.n_locations) if not fit.flagged[j]
    ]
    return float(np.mean(values)) if values else float("nan")


def _component_at(component: str, j: int, kappa: int) -> Callable[[EstimationResult], float]:
    def evaluate(fit: EstimationResult) -> float:
        record = decompose(fit, j, kappa)
        return float("nan") if record is None else float(getattr(record, component))
    return evaluate


def resolve_functionals(fit: EstimationResult, specs: Sequence[str]) -> List[Functional]:
    """
    Parse functional ids.

        mean:<coef>      across-location average of a coefficient surface
        <coef>@<loc>     coefficient at one location ('#j' or coordinates)
        <coef>@*         coefficient at every location
        rts@<loc|*>, mean:rts
        dprod@<loc|*>, dtech@..., dtfp@...   pooled decomposition against the point-estimate benchmark
        theta
    """
    names = fit.coefficient_names
    panel = fit.panel
    out: List[Functional] = []
    kappa: Optional[int] = None
    for spec in specs:
        spec = spec.strip()
        if spec == "theta":
            out.append(Functional(spec, lambda f: f.theta))
        elif spec.startswith("mean:"):
            name = spec[5:]
            if name == "rts":
                out.append(Functional(spec, _mean_rts))
            elif name in names:
                out.append(Functional(spec, lambda f, name=name: float(np.nanmean(f.surface(name)))))
            else:
                raise ConfigError(f"unknown coefficient '{name}' in functional '{spec}'")
        elif "@" in spec:
            name, token = spec.split("@", 1)
            targets = range(panel.n_locations) if token == "*" else [_location(panel, token)]
            for j in targets:
                fid = f"{name}@#{j}" if token == "*" else spec
                if name in names:
                    out.append(Functional(fid, _coefficient_at(name, j)))
                elif name == "rts":
                    out.append(Functional(fid, _rts_at(j)))
                elif name in ("dprod", "dtech", "dtfp"):
                    kappa = select_benchmark(fit) if kappa is None else kappa
                    out.append(Functional(fid, _component_at(f"d_{name[1:]}", j, kappa)))
                else:
                    raise ConfigError(f"unknown functional '{spec}'")
        else:
            raise ConfigError(f"unknown functional '{spec}'")
    return out


# =============================================================================
# WILD BOOTSTRAP
# =============================================================================

@dataclass
class BootstrapSample:
    """Regenerated data of one replicate"""
    xi: np.ndarray
    share: np.ndarray
    y_star: np.ndarray


@dataclass(eq=False)
class BootstrapDraws:
    B: int
    seed: int
    functionals: List[str]
    point: np.ndarray
    values: np.ndarray
    excluded: np.ndarray
    surfaces: Optional[np.ndarray] = None
    reasons: List[str] = field(default_factory=list)

    @property
    def n_excluded(self) -> int:
        return int(self.excluded.sum())

    def _column(self, functional: str) -> int:
        try:
            return self.functionals.index(functional)
        except ValueError:
            raise ConfigError(f"functional '{functional}' was not tracked") from None

    def values_for(self, functional: str) -> np.ndarray:
        """Successful replicate values of one functional"""
        col = self.values[~self.excluded, self._column(functional)]
        return col[np.isfinite(col)]

    def point_for(self, functional: str) -> float:
        return float(self.point[self._column(functional)])

    def frame(self) -> pd.DataFrame:
        """Long layout: functional, replicate, value (excluded replicates omitted)"""
        replicates = np.flatnonzero(~self.excluded)
        rows = [
            {"functional": fid, "replicate": int(b), "value": float(self.values[b, c])}
            for c, fid in enumerate(self.functionals)
            for b in replicates
        ]
        return pd.DataFrame(rows, columns=["functional", "replicate", "value"])


def _centered(residuals: np.ndarray) -> np.ndarray:
    finite = np.isfinite(residuals)
    out = np.zeros_like(residuals)
    if finite.any():
        out[finite] = residuals[finite] - residuals[finite].mean()
    return out


def bootstrap_sample(fit: EstimationResult, rng: np.random.Generator) -> BootstrapSample:
    """
    Perturb both residual series of ``fit`` with one Mammen weight per firm.

    v^b  = (v + eta_hat) - xi * eta_c
    y*^b = fitted second-step right-hand side + xi * (zeta + eta)_c
    """
    panel = fit.panel
    codes, n_firms = firm_codes(panel)
    xi = mammen_weights(rng, n_firms)[codes]
    ln_scaled = fitted_share(panel, fit.first)
    share = np.where(np.isfinite(ln_scaled), ln_scaled - xi * _centered(fit.eta_hat), panel.v)
    cur = fit.first.lagged.current
    y_star = np.full(len(panel), np.nan)
    y_star[cur] = fit.second.fitted + xi[cur] * _centered(fit.second.residuals)
    return BootstrapSample(xi=xi, share=share, y_star=y_star)


def refit(
    panel: PanelDataset,
    sample: BootstrapSample,
    h1: Optional[int],
    h2: Optional[int],
    tech: TechnologySpec,
) -> EstimationResult:
    """Both steps on replicate data; global (location-invariant) when h1 and h2 are None"""
    replicate = panel.with_share(sample.share)
    plan1 = WeightPlan(replicate, h1)
    plan2 = WeightPlan(replicate, h2)
    first = step1(replicate, h1, tech, plan=plan1)
    first = replace(first, y_star=sample.y_star)
    second = step2(replicate, first, h2, tech, plan=plan2)
    return EstimationResult(
        panel=replicate,
        tech=tech,
        h1=h1,
        h2=h2,
        first=first,
        second=second,
        productivity=recover_productivity(replicate, first, second),
        invariant=h1 is None,
    )


def _replicate(
    fit: EstimationResult,
    functionals: List[Functional],
    seed: int,
    b: int,
    store_full: bool,
) -> Tuple[Optional[np.ndarray], Optional[np.ndarray], str]:
    rng = np.random.default_rng([seed, b])
    sample = bootstrap_sample(fit, rng)
    try:
        rep = refit(fit.panel, sample, fit.h1, fit.h2, fit.tech)
    except LocProdError as e:
        return None, None, e.message
    new_flags = rep.flagged & ~fit.flagged
    if new_flags.any():
        return None, None, f"{int(new_flags.sum())} location(s) failed"
    values = np.array([f.evaluate(rep) for f in functionals])
    return values, (rep.coefficients if store_full else None), ""


def wild_bootstrap(
    panel: PanelDataset,
    fit: EstimationResult,
    B: int,
    seed: int,
    h1: Optional[int] = None,
    h2: Optional[int] = None,
    functionals: Optional[Sequence[str]] = None,
    store_full: bool = False,
    n_jobs: int = 1,
    max_exclusion: float = 0.01,
) -> BootstrapDraws:
    """
    Jointly bootstrap both estimation steps.

    Args:
        panel: the panel ``fit`` was estimated on
        fit: point estimate (local or location-invariant)
        B: replicates
        seed: root seed
        h1, h2: neighbor counts of the refits; default to the fit's own
        functionals: tracked functional ids (see ``resolve_functionals``); defaults to
            the across-location mean of every coefficient
        store_full: also keep every replicate coefficient surface
        n_jobs: joblib workers over replicates
        max_exclusion: warn when more than this share of replicates fails

    Returns:
        BootstrapDraws
    """
    if B < 1:
        raise ConfigError(f"bootstrap replicates must be positive, got {B}")
    if len(fit.panel) != len(panel):
        raise ConfigError("the fit was estimated on a different panel")
    if h1 is not None or h2 is not None:
        fit = replace(fit, h1=h1 or fit.h1, h2=h2 or fit.h2)
    specs = list(functionals) if functionals else [f"mean:{name}" for name in fit.coefficient_names]
    tracked = resolve_functionals(fit, specs)
    point = np.array([f.evaluate(fit) for f in tracked])
    logger.info(f"[bootstrap] {B} replicates, {len(tracked)} functional(s), seed {seed}")

    results = Parallel(n_jobs=n_jobs)(
        delayed(_replicate)(fit, tracked, seed, b, store_full) for b in range(B)
    )
    values = np.full((B, len(tracked)), np.nan)
    excluded = np.zeros(B, dtype=bool)
    reasons: List[str] = []
    surfaces = np.full((B, *fit.coefficients.shape), np.nan) if store_full else None
    for b, (vals, surface, reason) in enumerate(results):
        if vals is None:
            excluded[b] = True
            reasons.append(f"replicate {b}: {reason}")
            continue
        values[b] = vals
        if store_full:
            surfaces[b] = surface
    if excluded.any():
        share = excluded.mean()
        log = logger.warning if share > max_exclusion else logger.info
        log(f"[bootstrap] excluded {int(excluded.sum())}/{B} replicate(s) ({share:.1%})")
    return BootstrapDraws(
        B=B,
        seed=seed,
        functionals=[f.id for f in tracked],
        point=point,
        values=values,
        excluded=excluded,
        surfaces=surfaces,
        reasons=reasons,
    )


# =============================================================================
# PERCENTILE INTERVALS
# =============================================================================

SIDEDNESS = ("two-sided", "lower", "upper")


@dataclass(frozen=True)
class ConfidenceInterval:
    """``lower`` sidedness bounds from below only ([lower, inf)), ``upper`` from above"""
    level: float
    lower: float
    upper: float
    z0: float
    sidedness: str
    point: float
    replicates: int
    degenerate: bool = False

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def bias_correction(draws: np.ndarray, point: float) -> float:
    """z0 = Phi^-1(#{draw < point} / B), proportion clamped to [1/(2B), 1 - 1/(2B)]"""
    B = draws.size
    share = np.count_nonzero(draws < point) / B
    share = min(max(share, 1.0 / (2 * B)), 1.0 - 1.0 / (2 * B))
    return float(norm.ppf(share))


def percentile_ci(
    draws,
    point: float,
    alpha: float = 0.05,
    bias_correct: bool = True,
    sidedness: str = "two-sided",
) -> ConfidenceInterval:
    """
    Bias-corrected (or plain) bootstrap percentile interval.

    Quantiles use linear interpolation between order statistics (numpy ``linear``).

    Raises:
        InferenceError: fewer than 50 successful replicates
    """
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    if sidedness not in SIDEDNESS:
        raise ConfigError(f"sidedness must be one of {SIDEDNESS}, got '{sidedness}'")
    draws = np.asarray(draws, dtype=float)
    draws = draws[np.isfinite(draws)]
    if draws.size < MIN_REPLICATES:
        raise InferenceError(
            f"{draws.size} successful replicates, at least {MIN_REPLICATES} needed", replicates=int(draws.size)
        )
    level = 1.0 - alpha
    if np.all(draws == draws[0]):
        v = float(draws[0])
        return ConfidenceInterval(level, v, v, 0.0, sidedness, float(point), int(draws.size), degenerate=True)

    z0 = bias_correction(draws, point) if bias_correct else 0.0
    if sidedness == "two-sided":
        a1 = norm.cdf(2 * z0 + norm.ppf(alpha / 2))
        a2 = norm.cdf(2 * z0 + norm.ppf(1 - alpha / 2))
        lower, upper = np.quantile(draws, [a1, a2], method="linear")
    elif sidedness == "lower":
        o1 = norm.cdf(2 * z0 + norm.ppf(alpha))
        lower, upper = float(np.quantile(draws, o1, method="linear")), math.inf
    else:
        o2 = norm.cdf(2 * z0 + norm.ppf(1 - alpha))
        lower, upper = -math.inf, float(np.quantile(draws, o2, method="linear"))
    return ConfidenceInterval(level, float(lower), float(upper), z0, sidedness, float(point), int(draws.size))


def interval_table(
    draws: BootstrapDraws,
    alpha: float = 0.05,
    bias_correct: bool = True,
    sidedness: str = "two-sided",
) -> pd.DataFrame:
    """One interval per tracked functional"""
    rows = []
    for fid in draws.functionals:
        ci = percentile_ci(draws.values_for(fid), draws.point_for(fid), alpha, bias_correct, sidedness)
        rows.append({
            "functional": fid, "point": ci.point, "lower": ci.lower, "upper": ci.upper, "z0": ci.z0,
            "level": ci.level, "sidedness": ci.sidedness, "replicates": ci.replicates,
            "degenerate": ci.degenerate,
        })
    return pd.DataFrame(rows)


# =============================================================================
# INVARIANCE TEST
# =============================================================================

@dataclass(eq=False)
class InvarianceTestResult:
    statistic: float
    rss_restricted: float
    rss_unrestricted: float
    draws: np.ndarray
    p_value: float
    B: int
    excluded: int

    def to_dict(self) -> Dict[str, float]:
        return {
            "statistic": self.statistic,
            "rss_restricted": self.rss_restricted,
            "rss_unrestricted": self.rss_unrestricted,
            "p_value": self.p_value,
            "B": self.B,
            "successful_replicates": int(self.draws.size),
            "excluded_replicates": self.excluded,
        }


def invariance_statistic(restricted: EstimationResult, unrestricted: EstimationResult) -> Tuple[float, float, float]:
    """T = (RSS0 - RSS1) / RSS1 over lagged rows with both residuals finite"""
    r0 = restricted.second.residuals
    r1 = unrestricted.second.residuals
    both = np.isfinite(r0) & np.isfinite(r1)
    rss0 = float(np.sum(r0[both] ** 2))
    rss1 = float(np.sum(r1[both] ** 2))
    if rss1 <= 0:
        raise InferenceError("unrestricted residual sum of squares is zero")
    return (rss0 - rss1) / rss1, rss0, rss1


def _null_replicate(
    restricted: EstimationResult,
    h1: int,
    h2: int,
    seed: int,
    b: int,
) -> Tuple[float, str]:
    rng = np.random.default_rng([seed, b])
    sample = bootstrap_sample(restricted, rng)
    try:
        null_fit = refit(restricted.panel, sample, None, None, restricted.tech)
        local_fit = refit(restricted.panel, sample, h1, h2, restricted.tech)
        statistic, _, _ = invariance_statistic(null_fit, local_fit)
    except LocProdError as e:
        return float("nan"), e.message
    return statistic, ""


def invariance_test(
    panel: PanelDataset,
    h1: int,
    h2: int,
    B: int,
    seed: int,
    tech: Optional[TechnologySpec] = None,
    n_jobs: int = 1,
) -> InvarianceTestResult:
    """
    Bootstrap test of location invariance.

    Replicate data are generated under the null from the restricted (location-invariant)
    fit; both models are refit on every replicate. p = (1 + #{T^b >= T}) / (B' + 1)
    with B' successful replicates.
    """
    if B < 1:
        raise ConfigError(f"bootstrap replicates must be positive, got {B}")
    restricted = estimate_invariant(panel, tech)
    unrestricted = full_fit(panel, h1, h2, restricted.tech)
    statistic, rss0, rss1 = invariance_statistic(restricted, unrestricted)
    logger.info(f"[invariance] T = {statistic:.6g} (RSS0 {rss0:.6g}, RSS1 {rss1:.6g})")

    results = Parallel(n_jobs=n_jobs)(
        delayed(_null_replicate)(restricted, h1, h2, seed, b) for b in range(B)
    )
    draws = np.array([t for t, _ in results])
    ok = np.isfinite(draws)
    excluded = int((~ok).sum())
    if excluded:
        logger.warning(f"[invariance] excluded {excluded}/{B} replicate(s)")
    draws = draws[ok]
    p_value = (1.0 + np.count_nonzero(draws >= statistic)) / (draws.size + 1.0)
    logger.info(f"[invariance] p = {p_value:.4f} from {draws.size} replicate(s)")
    return InvarianceTestResult(
        statistic=statistic,
        rss_restricted=rss0,
        rss_unrestricted=rss1,
        draws=draws,
        p_value=float(p_value),
        B=B,
        excluded=excluded,
    )
