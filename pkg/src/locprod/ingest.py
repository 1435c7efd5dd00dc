"""
Panel ingestion
===============

Load delimiter-separated firm-year data, validate it, derive the log material share and
build the (t, t-1) row pairs the second estimation step consumes.

Usage:
    panel = load_panel("firms.csv", PanelSchema(firm="id", period="year", ...), log_transform=True)
    lagged = build_lagged_rows(panel)
"""

import io
import json
import logging
import re
from pathlib import Path
from typing import Dict, Optional, TextIO, Union

import numpy as np
import pandas as pd

from locprod.errors import (
    ConfigError,
    PanelDomainError,
    PanelIntegrityError,
    PanelParseError,
    PanelSchemaError,
)
from locprod.models.panel import LaggedRows, PanelDataset, PanelSchema

logger = logging.getLogger(__name__)

PANEL_FILE = "panel.csv"
PANEL_META_FILE = "panel.json"

Source = Union[str, Path, TextIO]


# =============================================================================
# SHARE / LAGS
# =============================================================================

def derive_share(m, y, price_ratio=0.0):
    """Log nominal material share v = ln(P^M/P^Y) + m - y"""
    return np.asarray(price_ratio, dtype=float) + np.asarray(m, dtype=float) - np.asarray(y, dtype=float)


def build_lagged_rows(panel: PanelDataset) -> LaggedRows:
    """Pair every observation with the same firm's observation at period - 1.

    Gaps in unbalanced panels simply produce no pair.
    """
    frame = pd.DataFrame({
        "firm": panel.firm_id,
        "period": panel.period,
        "idx": np.arange(len(panel)),
    })
    lag = frame.assign(period=frame["period"] + 1).rename(columns={"idx": "lag_idx"})
    pairs = frame.merge(lag, on=["firm", "period"], how="inner").sort_values("idx")
    if pairs.empty:
        logger.warning("No lagged rows: no firm is observed in two consecutive periods")
    return LaggedRows(
        current=pairs["idx"].to_numpy(dtype=np.int64),
        lagged=pairs["lag_idx"].to_numpy(dtype=np.int64),
    )


# =============================================================================
# LOADING
# =============================================================================

def _read_source(source: Source, delimiter: str) -> pd.DataFrame:
    try:
        return pd.read_csv(
            source,
            sep=delimiter,
            dtype=str,
            keep_default_na=False,
            skipinitialspace=True,
        )
    except pd.errors.ParserError as e:
        row = _row_from_message(str(e))
        raise PanelParseError(row, f"malformed row ({e})") from e
    except pd.errors.EmptyDataError as e:
        raise PanelParseError(1, "empty source, expected a header row") from e
    except OSError as e:
        raise ConfigError(f"cannot read panel source: {e}") from e


def _row_from_message(message: str) -> int:
    match = re.search(r"line (\d+)", message)
    return int(match.group(1)) if match else -1


def _numeric(raw: pd.DataFrame, column: str) -> np.ndarray:
    # float() is correctly rounded, so canonical files reload bit-identically
    out = np.empty(len(raw))
    for pos, text in enumerate(raw[column]):
        try:
            out[pos] = float(text)
        except ValueError:
            raise PanelParseError(pos + 2, f"non-numeric value {text!r}", column=column) from None
        if not np.isfinite(out[pos]):
            raise PanelParseError(pos + 2, f"non-finite value {text!r}", column=column)
    return out


def _per_period(period: np.ndarray, values: np.ndarray, name: str) -> np.ndarray:
    frame = pd.DataFrame({"period": period, "value": values})
    spread = frame.groupby("period")["value"].nunique()
    if (spread > 1).any():
        bad = int(spread[spread > 1].index[0])
        raise PanelIntegrityError(f"'{name}' varies within period {bad}", period=bad, column=name)
    return values


def load_panel(
    source: Source,
    schema: Optional[PanelSchema] = None,
    log_transform: bool = False,
    delimiter: str = ",",
) -> PanelDataset:
    """
    Load and validate a firm-level panel.

    Args:
        source: path or text stream, delimiter-separated with a header row
        schema: column map (canonical name -> source column)
        log_transform: when set, output and input columns hold levels and are logged here
        delimiter: field separator

    Returns:
        PanelDataset
    """
    schema = schema or PanelSchema()
    raw = _read_source(source, delimiter)
    raw.columns = [c.strip() for c in raw.columns]

    required = {
        "firm": schema.firm, "period": schema.period, "output": schema.output,
        "capital": schema.capital, "materials": schema.materials, "latitude": schema.latitude,
    }
    if schema.labor is not None:
        required["labor"] = schema.labor
    if schema.longitude is not None:
        required["longitude"] = schema.longitude
    optional = {
        "materials_cost": schema.materials_cost, "revenue": schema.revenue,
        "price_materials": schema.price_materials, "price_output": schema.price_output,
        "price_ratio": schema.price_ratio, "share": schema.share,
    }
    for canonical, column in [*required.items(), *[(c, col) for c, col in optional.items() if col]]:
        if column not in raw.columns:
            raise PanelSchemaError(column, f"missing required column '{column}' ({canonical})")
    for column in schema.controls:
        if column not in raw.columns:
            raise PanelSchemaError(column, f"missing control column '{column}'")

    firm = raw[schema.firm].str.strip().to_numpy(dtype=object)
    period_values = _numeric(raw, schema.period)
    if not np.all(np.equal(np.mod(period_values, 1), 0)):
        pos = int(np.flatnonzero(np.mod(period_values, 1))[0])
        raise PanelParseError(pos + 2, "period must be an integer", column=schema.period)
    period = period_values.astype(np.int64)

    inputs: Dict[str, np.ndarray] = {}
    names = {"y": schema.output, "k": schema.capital, "m": schema.materials}
    if schema.labor is not None:
        names["l"] = schema.labor
    for key, column in names.items():
        values = _numeric(raw, column)
        if log_transform:
            _check_positive(values, column, firm, period)
            values = np.log(values)
        inputs[key] = values

    coords = [_numeric(raw, schema.latitude)]
    if schema.longitude is not None:
        coords.append(_numeric(raw, schema.longitude))
    coords_arr = np.column_stack(coords)

    controls = np.column_stack([_numeric(raw, c) for c in schema.controls]) if schema.controls else None

    # period price ratio ln(P^M_t / P^Y_t); deflated data convention when absent
    if schema.price_ratio:
        price_ratio = _per_period(period, _numeric(raw, schema.price_ratio), schema.price_ratio)
    elif schema.price_materials and schema.price_output:
        pm = _numeric(raw, schema.price_materials)
        py = _numeric(raw, schema.price_output)
        _check_positive(pm, schema.price_materials, firm, period)
        _check_positive(py, schema.price_output, firm, period)
        price_ratio = _per_period(period, np.log(pm) - np.log(py), "price_ratio")
    else:
        price_ratio = np.zeros(len(raw))

    if schema.share:
        v = _numeric(raw, schema.share)
    elif schema.materials_cost and schema.revenue:
        cost = _numeric(raw, schema.materials_cost)
        revenue = _numeric(raw, schema.revenue)
        _check_positive(cost, schema.materials_cost, firm, period)
        _check_positive(revenue, schema.revenue, firm, period)
        v = np.log(cost) - np.log(revenue)
    else:
        v = derive_share(inputs["m"], inputs["y"], price_ratio)

    panel = PanelDataset.from_arrays(
        firm_id=firm,
        period=period,
        y=inputs["y"],
        k=inputs["k"],
        l=inputs.get("l"),
        m=inputs["m"],
        coords=coords_arr,
        v=v,
        price_ratio=price_ratio,
        controls=controls,
        control_names=tuple(schema.controls),
    )
    logger.info(
        f"Loaded panel: {panel.n_obs} observations, {panel.n_firms} firms, "
        f"{panel.n_locations} locations"
    )
    return panel


def _check_positive(values: np.ndarray, column: str, firm: np.ndarray, period: np.ndarray) -> None:
    bad = ~(np.isfinite(values) & (values > 0))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise PanelDomainError(firm[i], int(period[i]), column, float(values[i]))


# =============================================================================
# WRITING
# =============================================================================

def panel_metadata(panel: PanelDataset) -> Dict[str, object]:
    return {
        "observations": panel.n_obs,
        "firms": panel.n_firms,
        "locations": panel.n_locations,
        "period_range": [int(panel.period.min()), int(panel.period.max())] if len(panel) else None,
        "has_labor": panel.has_labor,
        "coordinate_dim": panel.dim,
        "controls": list(panel.control_names),
        "lagged_rows": len(build_lagged_rows(panel)),
    }


def write_panel(panel: PanelDataset, directory: Union[str, Path]) -> Path:
    """Write the canonical CSV mirror plus JSON metadata; returns the CSV path"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / PANEL_FILE
    panel.to_frame().to_csv(path, index=False, float_format="%.17g")
    meta = panel_metadata(panel)
    meta["schema"] = PanelSchema.canonical(panel.has_labor, panel.dim, list(panel.control_names)).model_dump()
    (directory / PANEL_META_FILE).write_text(json.dumps(meta, indent=2))
    return path


def load_canonical(directory: Union[str, Path]) -> PanelDataset:
    """Reload a panel written by ``write_panel``"""
    directory = Path(directory)
    meta = json.loads((directory / PANEL_META_FILE).read_text())
    return load_panel(directory / PANEL_FILE, PanelSchema(**meta["schema"]), log_transform=False)


def load_panel_text(text: str, schema: Optional[PanelSchema] = None, log_transform: bool = False) -> PanelDataset:
    return load_panel(io.StringIO(text), schema, log_transform)
