"""
Returns to scale and locational productivity differentials
==========================================================

For a location s and benchmark kappa, with cell means of fitted output y - eta_hat,
inputs and omega_hat:

    dTECH = ln F(x_kappa; beta(s)) - ln F(x_kappa; beta(kappa))
    dTFP  = omega_s - omega_kappa
    dPROD = dTECH + dTFP
    dINPUT = ln F(x_s; beta(s)) - ln F(x_kappa; beta(s))

For Cobb-Douglas dTECH reduces to sum_x [beta_x(s) - beta_x(kappa)] x_kappa, dINPUT to
sum_x beta_x(s) (x_s - x_kappa), and the output gap splits exactly as dINPUT + dPROD. Cells are
(location, period), or (location, all periods) when pooled.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from locprod.errors import ConfigError
from locprod.models.results import EstimationResult, coordinate_columns
from locprod.tools.residuals import fixed_input_basis, material_terms

logger = logging.getLogger(__name__)

COMPONENTS = ("d_prod", "d_tech", "d_tfp")


@dataclass(frozen=True)
class LocationAggregate:
    """Simple means over one (location, period) cell; period None when pooled"""
    location: int
    period: Optional[int]
    n: int
    y_bar: float
    k_bar: float
    l_bar: Optional[float]
    m_bar: float
    omega_bar: float


@dataclass(frozen=True)
class DecompositionRecord:
    location: int
    benchmark: int
    period: Optional[int]
    d_prod: float
    d_tech: float
    d_tfp: float
    d_y: float
    d_k: float
    d_l: Optional[float]
    d_m: float
    input_effect: float


# =============================================================================
# RETURNS TO SCALE
# =============================================================================

def _get(values: Mapping[str, float], key: str) -> float:
    return float(values.get(key, 0.0) or 0.0)


def returns_to_scale(coefficients: Mapping[str, float], means: Optional[Mapping[str, float]] = None) -> float:
    """
    Sum of output elasticities at a location.

    Translog coefficients (any second-order key present) are evaluated at the location's
    mean log inputs ``means`` (keys k, l, m).
    """
    translog = any(key in coefficients for key in ("beta_KK", "beta_MM"))
    first_order = _get(coefficients, "beta_K") + _get(coefficients, "beta_L") + _get(coefficients, "beta_M")
    if not translog:
        return first_order
    if means is None:
        raise ConfigError("translog returns to scale need the location's mean log inputs")
    k, l, m = _get(means, "k"), _get(means, "l"), _get(means, "m")
    c = {name: _get(coefficients, name) for name in ("beta_KK", "beta_LL", "beta_MM", "beta_KL", "beta_KM", "beta_LM")}
    e_k = c["beta_KK"] * k + c["beta_KL"] * l + c["beta_KM"] * m
    e_l = c["beta_LL"] * l + c["beta_KL"] * k + c["beta_LM"] * m
    e_m = c["beta_MM"] * m + c["beta_KM"] * k + c["beta_LM"] * l
    return first_order + e_k + e_l + e_m


def location_means(fit: EstimationResult) -> pd.DataFrame:
    """Mean log inputs per unique location"""
    panel = fit.panel
    frame = pd.DataFrame({"location_id": panel.location_index, "k": panel.k, "m": panel.m})
    frame["l"] = panel.l if panel.l is not None else 0.0
    return frame.groupby("location_id")[["k", "l", "m"]].mean()


def rts_surface(fit: EstimationResult) -> pd.DataFrame:
    """Returns to scale at every unflagged location"""
    means = location_means(fit)
    rows = []
    for j in range(fit.panel.n_locations):
        if fit.flagged[j]:
            continue
        coords = dict(zip(coordinate_columns(fit.panel), fit.panel.locations[j]))
        rts = returns_to_scale(fit.parameters(j), means.loc[j].to_dict())
        rows.append({"location_id": j, **coords, "rts": rts})
    return pd.DataFrame(rows, columns=["location_id", *coordinate_columns(fit.panel), "rts"])


def coefficient_summary(fit: EstimationResult) -> pd.DataFrame:
    """Mean and quartiles across observations of every coefficient and of returns to scale"""
    series: Dict[str, np.ndarray] = {name: fit.at_observations(name) for name in fit.coefficient_names}
    rts = rts_surface(fit).set_index("location_id")["rts"]
    series["rts"] = rts.reindex(np.arange(fit.panel.n_locations)).to_numpy()[fit.panel.location_index]
    rows = []
    for name, values in series.items():
        values = values[np.isfinite(values)]
        if values.size == 0:
            continue
        q1, q2, q3 = np.quantile(values, [0.25, 0.5, 0.75])
        rows.append({"coefficient": name, "mean": values.mean(), "q1": q1, "median": q2, "q3": q3})
    return pd.DataFrame(rows)


# =============================================================================
# AGGREGATES / BENCHMARK
# =============================================================================

def aggregates(fit: EstimationResult, pooled: bool = True) -> pd.DataFrame:
    """Cell means indexed by (location_id, period); period is -1 when pooled"""
    panel = fit.panel
    frame = pd.DataFrame({
        "location_id": panel.location_index,
        "period": -1 if pooled else panel.period,
        "firm_id": panel.firm_id,
        "y_bar": fit.fitted_output,
        "k_bar": panel.k,
        "l_bar": panel.l if panel.l is not None else np.nan,
        "m_bar": panel.m,
        "omega_bar": fit.omega_hat,
    })
    frame = frame[~fit.flagged[panel.location_index]]
    grouped = frame.groupby(["location_id", "period"])
    out = grouped[["y_bar", "k_bar", "l_bar", "m_bar", "omega_bar"]].mean()
    out["n"] = grouped["firm_id"].nunique()
    return out


def select_benchmark(fit: EstimationResult) -> int:
    """Location with the smallest pooled mean fitted output; ties go to the lexicographically smallest coordinates"""
    pooled = aggregates(fit, pooled=True)["y_bar"].droplevel("period")
    if pooled.empty:
        raise ConfigError("no unflagged location to serve as benchmark")
    # locations are stored in lexicographic coordinate order, so the first minimum wins ties
    values = pooled.sort_index()
    return int(values.index[int(np.argmin(values.to_numpy()))])


def _aggregate(cells: pd.DataFrame, location: int, period: Optional[int]) -> Optional[LocationAggregate]:
    key = (location, -1 if period is None else period)
    if key not in cells.index:
        return None
    row = cells.loc[key]
    l_bar = None if np.isnan(row["l_bar"]) else float(row["l_bar"])
    return LocationAggregate(
        location=location, period=period, n=int(row["n"]), y_bar=float(row["y_bar"]),
        k_bar=float(row["k_bar"]), l_bar=l_bar, m_bar=float(row["m_bar"]), omega_bar=float(row["omega_bar"]),
    )


def _technology(fit: EstimationResult, location: int, cell: LocationAggregate) -> float:
    """ln F at the cell's mean inputs with ``location``'s coefficients"""
    k = np.array([cell.k_bar])
    l = None if cell.l_bar is None else np.array([cell.l_bar])
    m = np.array([cell.m_bar])
    basis = fixed_input_basis(k, l, fit.tech.form)
    fixed = fit.second.coefficients[location, :basis.shape[1]]
    return float(basis[0] @ fixed + material_terms(fit.first.coefficients[location], k, l, m)[0])


# =============================================================================
# DECOMPOSITION
# =============================================================================

def decompose(
    fit: EstimationResult,
    s: int,
    kappa: int,
    period: Optional[int] = None,
    cells: Optional[pd.DataFrame] = None,
) -> Optional[DecompositionRecord]:
    """
    dPROD = dTECH + dTFP of location s against benchmark kappa.

    Args:
        fit: estimation result
        s: location index
        kappa: benchmark location index
        period: period of the cell; None pools all periods
        cells: precomputed ``aggregates`` (must match ``period is None``)

    Returns:
        DecompositionRecord, or None when either cell is empty
    """
    if cells is None:
        cells = aggregates(fit, pooled=period is None)
    a_s, a_k = _aggregate(cells, s, period), _aggregate(cells, kappa, period)
    if a_s is None or a_k is None:
        logger.warning(f"No decomposition for location {s} vs {kappa}, period {period}: empty cell")
        return None
    d_tech = _technology(fit, s, a_k) - _technology(fit, kappa, a_k)
    d_tfp = a_s.omega_bar - a_k.omega_bar
    d_y = a_s.y_bar - a_k.y_bar
    return DecompositionRecord(
        location=s,
        benchmark=kappa,
        period=period,
        d_prod=d_tech + d_tfp,
        d_tech=d_tech,
        d_tfp=d_tfp,
        d_y=d_y,
        d_k=a_s.k_bar - a_k.k_bar,
        d_l=None if a_s.l_bar is None else a_s.l_bar - a_k.l_bar,
        d_m=a_s.m_bar - a_k.m_bar,
        input_effect=_technology(fit, s, a_s) - _technology(fit, s, a_k),
    )


def decomposition_table(
    fit: EstimationResult,
    benchmark: Optional[int] = None,
    pooled: bool = True,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Decompose every location against the benchmark.

    Args:
        fit: estimation result
        benchmark: location index; defaults to ``select_benchmark``
        pooled: grand means instead of per-period means

    Returns:
        (records, summary): one row per (location, period) with coordinates and all
        components, and mean/quartiles of dPROD, dTECH, dTFP
    """
    panel = fit.panel
    coord_names = coordinate_columns(panel)
    record_columns = ["location_id", *coord_names, *[f for f in DecompositionRecord.__dataclass_fields__ if f != "location"]]
    if panel.n_locations < 2:
        logger.warning("Single-location panel: nothing to decompose")
        return pd.DataFrame(columns=record_columns), _summary([])

    kappa = select_benchmark(fit) if benchmark is None else int(benchmark)
    cells = aggregates(fit, pooled=pooled)
    periods: List[Optional[int]] = [None] if pooled else sorted(int(t) for t in np.unique(panel.period))
    records: List[DecompositionRecord] = []
    for period in periods:
        for s in range(panel.n_locations):
            if fit.flagged[s]:
                continue
            if (s, -1 if period is None else period) not in cells.index:
                continue
            record = decompose(fit, s, kappa, period, cells)
            if record is not None:
                records.append(record)

    rows = []
    for record in records:
        values = asdict(record)
        location = values.pop("location")
        coords = dict(zip(coord_names, panel.locations[location]))
        rows.append({"location_id": location, **coords, **values})
    logger.info(f"Decomposed {len(records)} cell(s) against benchmark location {kappa}")
    return pd.DataFrame(rows, columns=record_columns), _summary(records)


def _summary(records: List[DecompositionRecord]) -> pd.DataFrame:
    rows = []
    for name in COMPONENTS:
        values = np.array([getattr(r, name) for r in records], dtype=float)
        if values.size:
            q1, q2, q3 = np.quantile(values, [0.25, 0.5, 0.75])
            rows.append({"component": name, "mean": values.mean(), "q1": q1, "median": q2, "q3": q3, "n": values.size})
        else:
            rows.append({"component": name, "mean": np.nan, "q1": np.nan, "median": np.nan, "q3": np.nan, "n": 0})
    return pd.DataFrame(rows)
