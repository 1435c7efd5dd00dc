"""
locprod command line
====================

    locprod estimate        --config run.yaml --input firms.csv --output runs/est
    locprod cv              --input firms.csv --h-grid 50 100 200
    locprod infer           --input firms.csv --h1 200 --h2 200 --B 199 --functional mean:beta_K
    locprod test-invariance --input firms.csv --h1 200 --h2 200 --B 199
    locprod decompose       --input firms.csv --h1 200 --h2 200
    locprod simulate        --sizes 100 200 400 --Q 200
    locprod coverage        --n 200 --Q 100 --B 199

Configuration comes from a YAML file (or the ``config`` block of a manifest.json),
then LOCPROD_SEED / LOCPROD_WORKERS, then command-line flags.

Exit codes: 0 success, 2 configuration or data error, 3 numerical failure. Failures
write error.json to the output directory and print the same payload to stderr.
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from locprod.artifacts import (
    estimation_summary,
    write_csv,
    write_error,
    write_estimation,
    write_json,
    write_manifest,
)
from locprod.decomposition import decomposition_table
from locprod.errors import ConfigError, LocProdError, NumericalError
from locprod.estimator import cross_validate, estimate_invariant, full_fit, step1
from locprod.inference import interval_table, invariance_test, wild_bootstrap
from locprod.ingest import load_panel
from locprod.models.config import RunConfig
from locprod.models.panel import PanelDataset
from locprod.models.results import CrossValidationResult, EstimationResult, TechnologySpec
from locprod.simulator import coverage_study, rejection_rate, run_monte_carlo

logger = logging.getLogger(__name__)

COMMANDS = ("estimate", "cv", "infer", "test-invariance", "decompose", "simulate", "coverage")
DEFAULT_GRID_FRACTIONS = (0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0)


# =============================================================================
# CONFIGURATION
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="locprod",
        description="Locationally varying production functions: estimation, inference, decomposition and simulation.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="YAML run config or a previous manifest.json")
    parser.add_argument("--input", type=Path, help="Firm panel CSV")
    parser.add_argument("--output", type=Path, help="Run directory (default runs/latest)")
    parser.add_argument("--tech", choices=["cobb-douglas", "translog"])
    parser.add_argument("--h1", help="First-step neighbor count, or 'cv'")
    parser.add_argument("--h2", help="Second-step neighbor count, or 'cv'")
    parser.add_argument("--h-grid", type=int, nargs="+", help="Candidate neighbor counts for cross-validation")
    parser.add_argument("--invariant", action="store_true", default=None, help="Location-invariant estimator")
    parser.add_argument("--log-transform", action="store_true", default=None, help="Input columns hold levels")
    parser.add_argument("--delimiter")
    parser.add_argument("--B", type=int, help="Bootstrap replicates")
    parser.add_argument("--Q", type=int, help="Monte Carlo simulations")
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int, help="joblib worker count")
    parser.add_argument("--functional", action="append", dest="functionals", help="Tracked functional (repeatable)")
    parser.add_argument("--per-period", action="store_false", dest="pooled", default=None,
                        help="Decompose per period instead of pooling")
    parser.add_argument("--benchmark", type=int, help="Benchmark location index")
    parser.add_argument("--no-bias-correct", action="store_false", dest="bias_correct", default=None)
    parser.add_argument("--sidedness", choices=["two-sided", "lower", "upper"])
    parser.add_argument("--store-full-draws", action="store_true", default=None)
    parser.add_argument("--estimator", choices=["kernel", "sample-splitting"])
    parser.add_argument("--sizes", type=int, nargs="+", help="Firm counts for simulate / coverage")
    parser.add_argument("--n", type=int, help="Simulated firms")
    parser.add_argument("--T", type=int, help="Simulated periods")
    parser.add_argument("--invariant-truth", action="store_true", default=None,
                        help="Simulate with location-invariant coefficients")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--quiet", action="store_true", help="No progress bars")
    return parser


def _read_config_file(path: Path) -> Dict[str, Any]:
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from e
    try:
        if path.suffix == ".json":
            document = json.loads(text)
            return dict(document.get("config", document))
        return dict(yaml.safe_load(text) or {})
    except (json.JSONDecodeError, yaml.YAMLError, TypeError, ValueError) as e:
        raise ConfigError(f"cannot parse config file {path}: {e}") from e


def _bandwidth_flag(value: Optional[str]) -> Any:
    if value is None or value == "cv":
        return value
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"neighbor count must be an integer or 'cv', got '{value}'") from None


def load_config(args: argparse.Namespace) -> RunConfig:
    """File, then environment, then flags"""
    data: Dict[str, Any] = _read_config_file(args.config) if args.config else {}

    if os.environ.get("LOCPROD_SEED"):
        data["seed"] = os.environ["LOCPROD_SEED"]
    if os.environ.get("LOCPROD_WORKERS"):
        data["workers"] = os.environ["LOCPROD_WORKERS"]

    flags = {
        "input": args.input, "output": args.output, "tech": args.tech,
        "h1": _bandwidth_flag(args.h1), "h2": _bandwidth_flag(args.h2), "h_grid": args.h_grid,
        "invariant": args.invariant, "log_transform": args.log_transform, "delimiter": args.delimiter,
        "B": args.B, "Q": args.Q, "alpha": args.alpha, "seed": args.seed, "workers": args.workers,
        "functionals": args.functionals, "pooled": args.pooled, "benchmark": args.benchmark,
        "bias_correct": args.bias_correct, "sidedness": args.sidedness,
        "store_full_draws": args.store_full_draws, "estimator": args.estimator, "sizes": args.sizes,
    }
    data.update({k: v for k, v in flags.items() if v is not None})
    simulation = dict(data.get("simulation") or {})
    for key in ("n", "T", "invariant_truth"):
        value = getattr(args, key)
        if value is not None:
            simulation[key] = value
    if "seed" in data:
        simulation["seed"] = data["seed"]
    data["simulation"] = simulation
    data["command"] = args.command

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}", errors=[err["msg"] for err in e.errors()]) from None


# =============================================================================
# SHARED PIPELINE
# =============================================================================

def _load(config: RunConfig) -> PanelDataset:
    if config.input is None:
        raise ConfigError(f"'{config.command}' needs an input panel (--input or 'input' in the config)")
    return load_panel(config.input, config.schema_map, config.log_transform, config.delimiter)


def default_grid(panel: PanelDataset) -> List[int]:
    n = len(panel)
    return sorted({max(1, min(n, int(round(f * n)))) for f in DEFAULT_GRID_FRACTIONS})


def shortcut_bandwidth(panel: PanelDataset) -> int:
    """0.3 N^(4/5), rounded"""
    return max(1, min(len(panel), int(round(0.3 * len(panel) ** 0.8))))


def resolve_bandwidths(
    panel: PanelDataset,
    config: RunConfig,
    tech: TechnologySpec,
) -> Tuple[Optional[int], Optional[int], List[CrossValidationResult]]:
    """Explicit neighbor counts, cross-validated ones ('cv') or the 0.3 N^(4/5) shortcut when unset"""
    if config.invariant:
        return None, None, []
    grid = config.h_grid or default_grid(panel)
    runs: List[CrossValidationResult] = []

    h1 = config.h1 if config.h1 is not None else shortcut_bandwidth(panel)
    if h1 == "cv":
        cv1 = cross_validate(panel, 1, grid, tech, n_jobs=config.workers)
        runs.append(cv1)
        h1 = cv1.h
    h2 = config.h2 if config.h2 is not None else shortcut_bandwidth(panel)
    if h2 == "cv":
        first = step1(panel, h1, tech, n_jobs=config.workers)
        cv2 = cross_validate(panel, 2, grid, tech, h1=h1, first=first, n_jobs=config.workers)
        runs.append(cv2)
        h2 = cv2.h
    return int(h1), int(h2), runs


def _fit(config: RunConfig) -> Tuple[PanelDataset, EstimationResult, Dict[str, Any]]:
    panel = _load(config)
    tech = TechnologySpec.for_panel(panel, config.tech)
    h1, h2, runs = resolve_bandwidths(panel, config, tech)
    if config.invariant:
        fit = estimate_invariant(panel, tech)
    else:
        fit = full_fit(panel, h1, h2, tech, n_jobs=config.workers)
    summary = estimation_summary(fit)
    if runs:
        summary["cv"] = {f"h{r.step}": r.h for r in runs}
    return panel, fit, summary


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_estimate(config: RunConfig, progress: bool) -> Dict[str, Any]:
    _, fit, summary = _fit(config)
    files = write_estimation(fit, config.output)
    write_manifest(config, config.output, summary, files)
    return summary


def cmd_cv(config: RunConfig, progress: bool) -> Dict[str, Any]:
    panel = _load(config)
    tech = TechnologySpec.for_panel(panel, config.tech)
    grid = config.h_grid or default_grid(panel)
    runs = []
    if isinstance(config.h1, int):
        h1 = config.h1
    else:
        cv1 = cross_validate(panel, 1, grid, tech, n_jobs=config.workers)
        runs.append(cv1)
        h1 = cv1.h
    first = step1(panel, h1, tech, n_jobs=config.workers)
    runs.append(cross_validate(panel, 2, grid, tech, h1=h1, first=first, n_jobs=config.workers))
    files = {"cv_scores": write_csv(config.output / "cv_scores.csv", pd.concat([r.frame() for r in runs]))}
    summary = {"h1": h1, "h2": runs[-1].h, "grid": [int(h) for h in runs[-1].h_grid]}
    write_manifest(config, config.output, summary, files)
    return summary


def cmd_infer(config: RunConfig, progress: bool) -> Dict[str, Any]:
    panel, fit, summary = _fit(config)
    draws = wild_bootstrap(
        panel, fit, config.B, config.seed,
        functionals=config.functionals or None,
        store_full=config.store_full_draws,
        n_jobs=config.workers,
    )
    intervals = interval_table(draws, config.alpha, config.bias_correct, config.sidedness)
    files = {
        "draws": write_csv(config.output / "draws.csv", draws.frame()),
        "intervals": write_csv(config.output / "intervals.csv", intervals),
        "intervals_json": write_json(config.output / "intervals.json", {"intervals": intervals.to_dict(orient="records")}),
    }
    if config.store_full_draws:
        names = fit.coefficient_names
        rows = [
            {"replicate": b, "location_id": j, **dict(zip(names, draws.surfaces[b, j]))}
            for b in np.flatnonzero(~draws.excluded)
            for j in range(panel.n_locations)
        ]
        files["surfaces"] = write_csv(config.output / "draw_surfaces.csv", pd.DataFrame(rows))
    summary.update({"B": config.B, "excluded_replicates": draws.n_excluded})
    write_manifest(config, config.output, summary, files)
    return summary


def cmd_test_invariance(config: RunConfig, progress: bool) -> Dict[str, Any]:
    """Test on a panel, or with no input the rejection-rate study on simulated panels"""
    if config.input is None:
        started = time.perf_counter()
        report = rejection_rate(config.simulation, config.Q, config.B, config.alpha,
                                h=config.simulation.h, n_jobs=config.workers, progress=progress)
        summary = report.to_dict()
        frame = pd.DataFrame({"replicate": np.arange(report.p_values.size), "p_value": report.p_values})
        files = {
            "study": write_json(config.output / "invariance_study.json", summary),
            "p_values": write_csv(config.output / "invariance_p_values.csv", frame),
        }
        write_manifest(config, config.output, summary, files, wall_time=time.perf_counter() - started)
        return summary

    panel = _load(config)
    tech = TechnologySpec.for_panel(panel, config.tech)
    if config.invariant:
        raise ConfigError("the invariance test compares against the local estimator; drop 'invariant'")
    h1, h2, runs = resolve_bandwidths(panel, config, tech)
    result = invariance_test(panel, h1, h2, config.B, config.seed, tech, n_jobs=config.workers)
    summary = {"h1": h1, "h2": h2, **result.to_dict()}
    files = {
        "test": write_json(config.output / "invariance_test.json", summary),
        "draws": write_csv(config.output / "invariance_draws.csv", pd.DataFrame({"statistic": result.draws})),
    }
    write_manifest(config, config.output, summary, files)
    return summary


def cmd_decompose(config: RunConfig, progress: bool) -> Dict[str, Any]:
    _, fit, summary = _fit(config)
    records, table = decomposition_table(fit, config.benchmark, config.pooled)
    files = {
        "decomposition": write_csv(config.output / "decomposition.csv", records),
        "summary": write_csv(config.output / "decomposition_summary.csv", table),
    }
    if not records.empty:
        summary["benchmark"] = int(records["benchmark"].iloc[0])
    write_manifest(config, config.output, summary, files)
    return summary


def _sizes(config: RunConfig) -> List[int]:
    return config.sizes or [config.simulation.n]


def cmd_simulate(config: RunConfig, progress: bool) -> Dict[str, Any]:
    started = time.perf_counter()
    frames = []
    for n in _sizes(config):
        sim = config.simulation.model_copy(update={"n": n})
        report = run_monte_carlo(sim, config.Q, config.estimator, h=sim.h, n_jobs=config.workers, progress=progress)
        frames.append(report.frame())
    table = pd.concat(frames, ignore_index=True)
    files = {"monte_carlo": write_csv(config.output / "monte_carlo.csv", table)}
    summary = {"sizes": _sizes(config), "Q": config.Q, "estimator": config.estimator}
    write_manifest(config, config.output, summary, files, wall_time=time.perf_counter() - started)
    return summary


def cmd_coverage(config: RunConfig, progress: bool) -> Dict[str, Any]:
    started = time.perf_counter()
    coverage, power = [], []
    for n in _sizes(config):
        sim = config.simulation.model_copy(update={"n": n})
        report = coverage_study(
            sim, config.Q, config.B, config.alpha,
            locations=config.coverage_locations,
            offsets=config.power_offsets,
            h=sim.h,
            n_jobs=config.workers,
            progress=progress,
        )
        coverage.append(report.frame())
        power.append(report.power.assign(n=n))
    files = {
        "coverage": write_csv(config.output / "coverage.csv", pd.concat(coverage, ignore_index=True)),
        "power": write_csv(config.output / "power.csv", pd.concat(power, ignore_index=True)),
    }
    summary = {"sizes": _sizes(config), "Q": config.Q, "B": config.B, "alpha": config.alpha}
    write_manifest(config, config.output, summary, files, wall_time=time.perf_counter() - started)
    return summary


HANDLERS: Dict[str, Callable[[RunConfig, bool], Dict[str, Any]]] = {
    "estimate": cmd_estimate,
    "cv": cmd_cv,
    "infer": cmd_infer,
    "test-invariance": cmd_test_invariance,
    "decompose": cmd_decompose,
    "simulate": cmd_simulate,
    "coverage": cmd_coverage,
}


# =============================================================================
# ENTRY POINT
# =============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s | %(levelname)s | %(message)s",
        force=True,
    )

    output: Optional[Path] = args.output
    try:
        config = load_config(args)
        output = config.output
        config.output.mkdir(parents=True, exist_ok=True)
        logger.info(f"locprod {config.command} -> {config.output}")
        HANDLERS[config.command](config, not args.quiet)
    except LocProdError as e:
        return _fail(e, output)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as e:
        return _fail(NumericalError(f"unexpected numerical failure: {e}", exception=type(e).__name__), output)
    logger.info("Done")
    return 0


def _fail(error: LocProdError, output: Optional[Path]) -> int:
    payload = write_error(error, output or Path("runs/latest"))
    logger.error(f"{type(error).__name__}: {error.message}")
    print(json.dumps(payload), file=sys.stderr)
    return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
