"""
locprod
=======

Locationally varying production functions: two-step kernel-weighted proxy estimation,
wild bootstrap inference, productivity decomposition and simulation tooling.
"""
from .decomposition import decompose, decomposition_table, returns_to_scale, select_benchmark
from .errors import LocProdError
from .estimator import cross_validate, estimate_invariant, full_fit, step1, step2
from .inference import invariance_test, percentile_ci, wild_bootstrap
from .ingest import build_lagged_rows, load_panel, write_panel
from .models.config import RunConfig, SimConfig
from .models.panel import PanelDataset, PanelSchema
from .models.results import EstimationResult, TechnologySpec
from .simulator import coverage_study, generate_panel, run_monte_carlo, sample_splitting_estimator

__version__ = "0.1.0"

__all__ = [
    "LocProdError",
    "PanelDataset",
    "PanelSchema",
    "TechnologySpec",
    "EstimationResult",
    "RunConfig",
    "SimConfig",
    "load_panel",
    "write_panel",
    "build_lagged_rows",
    "step1",
    "step2",
    "full_fit",
    "estimate_invariant",
    "cross_validate",
    "wild_bootstrap",
    "percentile_ci",
    "invariance_test",
    "returns_to_scale",
    "select_benchmark",
    "decompose",
    "decomposition_table",
    "generate_panel",
    "run_monte_carlo",
    "sample_splitting_estimator",
    "coverage_study",
]
