"""
Run artifacts
=============

Every run writes to one output directory with fixed file names:

    estimate          coefficients.csv, observations.csv, manifest.json
    cv                cv_scores.csv, manifest.json
    infer             draws.csv, intervals.csv, intervals.json, manifest.json
    test-invariance   invariance_test.json, invariance_draws.csv, manifest.json
    decompose         decomposition.csv, decomposition_summary.csv, manifest.json
    simulate          monte_carlo.csv, manifest.json
    coverage          coverage.csv, power.csv, manifest.json
    (any failure)     error.json

Floats are written with 17 significant digits so reruns compare byte for byte.
"""

import json
import logging
import os
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from locprod.decomposition import location_means, returns_to_scale
from locprod.errors import LocProdError
from locprod.models.config import RunConfig
from locprod.models.results import EstimationResult, coordinate_columns

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
QUANTILE_CONVENTION = "linear interpolation between order statistics (Hyndman-Fan type 7, numpy 'linear')"
ENV_KEYS = ("LOCPROD_SEED", "LOCPROD_WORKERS")

COEFFICIENTS_FILE = "coefficients.csv"
OBSERVATIONS_FILE = "observations.csv"
MANIFEST_FILE = "manifest.json"
ERROR_FILE = "error.json"


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else None
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path: Path, payload: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=False) + "\n")
    return path


def write_csv(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote {path}")
    return path


# =============================================================================
# ESTIMATION
# =============================================================================

def coefficient_frame(fit: EstimationResult) -> pd.DataFrame:
    """One row per unique location: coordinates, coefficients, RTS, theta and solver diagnostics"""
    panel = fit.panel
    frame = pd.DataFrame({"location_id": np.arange(panel.n_locations)})
    for j, name in enumerate(coordinate_columns(panel)):
        frame[name] = panel.locations[:, j]
    frame["n_obs"] = panel.location_counts
    for name in fit.coefficient_names:
        frame[name] = fit.surface(name)
    means = location_means(fit)
    frame["rts"] = [
        np.nan if fit.flagged[j] else returns_to_scale(fit.parameters(j), means.loc[j].to_dict())
        for j in range(panel.n_locations)
    ]
    frame["theta"] = fit.theta
    frame["h1_radius"] = fit.first.bandwidths
    frame["h2_radius"] = fit.second.bandwidths

    reports = fit.second.reports or [None] * panel.n_locations
    frame["converged"] = [r is not None and r.converged for r in reports]
    frame["iterations"] = [r.iterations if r is not None else 0 for r in reports]
    frame["weighted_rss"] = [r.rss if r is not None else np.nan for r in reports]
    frame["condition"] = [r.condition if r is not None else np.nan for r in reports]
    frame["flagged"] = fit.flagged
    reasons = fit.second.reasons or [""] * panel.n_locations
    frame["reason"] = [
        reason or ("first step failed" if fit.first.flags[j] else "") for j, reason in enumerate(reasons)
    ]
    return frame


def estimation_summary(fit: EstimationResult) -> Dict[str, Any]:
    return {
        "tech": fit.tech.form.value,
        "h1": fit.h1,
        "h2": fit.h2,
        "invariant": fit.invariant,
        "theta": fit.theta,
        "observations": fit.panel.n_obs,
        "firms": fit.panel.n_firms,
        "locations": fit.panel.n_locations,
        "lagged_rows": len(fit.first.lagged),
        "flagged_locations": int(fit.flagged.sum()),
    }


def write_estimation(fit: EstimationResult, directory: Path) -> Dict[str, Path]:
    return {
        "coefficients": write_csv(directory / COEFFICIENTS_FILE, coefficient_frame(fit)),
        "observations": write_csv(directory / OBSERVATIONS_FILE, fit.observation_frame()),
    }


# =============================================================================
# MANIFEST / ERRORS
# =============================================================================

def _version(package: str) -> Optional[str]:
    try:
        return metadata.version(package)
    except metadata.PackageNotFoundError:
        return None


def environment_block() -> Dict[str, Optional[str]]:
    return {key: os.environ.get(key) for key in ENV_KEYS}


def versions() -> Dict[str, Optional[str]]:
    return {name: _version(name) for name in ("locprod", "numpy", "scipy", "pandas", "joblib", "pydantic")}


def write_manifest(
    config: RunConfig,
    directory: Path,
    results: Optional[Dict[str, Any]] = None,
    files: Optional[Dict[str, Path]] = None,
    wall_time: Optional[float] = None,
) -> Path:
    """
    The manifest's ``config`` block reproduces the run on its own (``locprod <command> --config manifest.json``).

    Wall time is recorded for simulation commands only, so estimation manifests stay byte-identical across reruns.
    """
    payload: Dict[str, Any] = {
        "command": config.command,
        "config": config.manifest_block(),
        "environment": environment_block(),
        "versions": versions(),
        "quantile_convention": QUANTILE_CONVENTION,
        "results": results or {},
        "files": {k: p.name for k, p in (files or {}).items()},
    }
    if wall_time is not None:
        payload["wall_time_seconds"] = wall_time
    return write_json(directory / MANIFEST_FILE, payload)


def write_error(error: LocProdError, directory: Optional[Path]) -> Dict[str, Any]:
    payload = error.to_payload()
    if directory is not None:
        try:
            write_json(Path(directory) / ERROR_FILE, payload)
        except OSError as e:
            logger.warning(f"Could not write {ERROR_FILE}: {e}")
    return payload
