"""
Estimation result models
========================

Per-location coefficient surfaces are stored one row per unique location of the panel
(``PanelDataset.locations`` order); observations read their own location's row through
``PanelDataset.location_index``. Flagged locations carry NaN coefficients.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from locprod.models.panel import LaggedRows, PanelDataset
from locprod.tools.residuals import TechnologyForm, fixed_input_names, material_names
from locprod.tools.solver import SolverReport


class TechnologySpec(BaseModel):
    """Functional form of the production technology"""

    model_config = ConfigDict(frozen=True)

    form: TechnologyForm = TechnologyForm.COBB_DOUGLAS
    control_dimension: int = Field(default=0, ge=0)
    has_labor: bool = True

    @classmethod
    def for_panel(cls, panel: PanelDataset, form: TechnologyForm = TechnologyForm.COBB_DOUGLAS) -> "TechnologySpec":
        return cls(form=form, control_dimension=panel.control_dimension, has_labor=panel.has_labor)

    @property
    def is_translog(self) -> bool:
        return self.form is TechnologyForm.TRANSLOG

    @property
    def first_step_names(self) -> List[str]:
        return material_names(self.form, self.has_labor)

    @property
    def fixed_names(self) -> List[str]:
        return fixed_input_names(self.form, self.has_labor)

    @property
    def second_step_names(self) -> List[str]:
        rho2 = [f"rho2_{j + 1}" for j in range(self.control_dimension)]
        return [*self.fixed_names, "rho0", "rho1", *rho2]

    @property
    def coefficient_names(self) -> List[str]:
        return [*self.first_step_names, *self.second_step_names]


# =============================================================================
# STEPS
# =============================================================================

@dataclass(eq=False)
class FirstStepResult:
    """
    Share-equation step.

    ``scaled`` holds the theta-scaled surfaces: b_M(s) = ln[beta_M(s) theta] for
    Cobb-Douglas, the four theta-scaled elasticity parameters for translog.
    ``nu_star`` is aligned with ``lagged``.
    """
    tech: TechnologySpec
    scaled: np.ndarray
    coefficients: np.ndarray
    theta: float
    eta_hat: np.ndarray
    y_star: np.ndarray
    nu_star: np.ndarray
    lagged: LaggedRows
    bandwidths: np.ndarray
    flags: np.ndarray
    reports: List[Optional[SolverReport]] = field(default_factory=list)

    @property
    def names(self) -> List[str]:
        return self.tech.first_step_names

    @property
    def b_M(self) -> np.ndarray:
        if self.tech.is_translog:
            return np.log(self.scaled[:, 0])
        return self.scaled[:, 0]

    @property
    def beta_M(self) -> np.ndarray:
        return self.coefficients[:, 0]


@dataclass(eq=False)
class SecondStepResult:
    """Proxied production-function step; ``residuals`` and ``fitted`` align with the lagged rows"""
    tech: TechnologySpec
    coefficients: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    bandwidths: np.ndarray
    flags: np.ndarray
    reports: List[Optional[SolverReport]] = field(default_factory=list)
    reasons: List[str] = field(default_factory=list)

    @property
    def names(self) -> List[str]:
        return self.tech.second_step_names

    def column(self, name: str) -> np.ndarray:
        return self.coefficients[:, self.names.index(name)]


@dataclass(eq=False)
class ProductivitySeries:
    omega: np.ndarray


# =============================================================================
# BUNDLE
# =============================================================================

@dataclass(eq=False)
class EstimationResult:
    """Both steps plus recovered productivity"""
    panel: PanelDataset
    tech: TechnologySpec
    h1: Optional[int]
    h2: Optional[int]
    first: FirstStepResult
    second: SecondStepResult
    productivity: ProductivitySeries
    invariant: bool = False

    @property
    def coefficient_names(self) -> List[str]:
        return self.tech.coefficient_names

    @property
    def coefficients(self) -> np.ndarray:
        """(locations x coefficients) surface in ``coefficient_names`` order"""
        return np.column_stack([self.first.coefficients, self.second.coefficients])

    @property
    def flagged(self) -> np.ndarray:
        return self.first.flags | self.second.flags

    @property
    def theta(self) -> float:
        return self.first.theta

    @property
    def eta_hat(self) -> np.ndarray:
        return self.first.eta_hat

    @property
    def omega_hat(self) -> np.ndarray:
        return self.productivity.omega

    @property
    def fitted_output(self) -> np.ndarray:
        """y net of the transitory shock, y - eta_hat"""
        return self.panel.y - self.first.eta_hat

    def surface(self, name: str) -> np.ndarray:
        return self.coefficients[:, self.coefficient_names.index(name)]

    def at_observations(self, name: str) -> np.ndarray:
        return self.surface(name)[self.panel.location_index]

    def parameters(self, location: int = 0) -> Dict[str, float]:
        """Coefficients at one location, plus theta"""
        values = dict(zip(self.coefficient_names, (float(x) for x in self.coefficients[location])))
        values["theta"] = self.theta
        return values

    def observation_frame(self) -> pd.DataFrame:
        n = len(self.panel)
        composite = np.full(n, np.nan)
        nu_star = np.full(n, np.nan)
        cur = self.first.lagged.current
        composite[cur] = self.second.residuals
        nu_star[cur] = self.first.nu_star
        return pd.DataFrame({
            "firm_id": self.panel.firm_id,
            "period": self.panel.period,
            "location_id": self.panel.location_index,
            "y": self.panel.y,
            "fitted_output": self.fitted_output,
            "eta_hat": self.eta_hat,
            "omega_hat": self.omega_hat,
            "y_star": self.first.y_star,
            "nu_star_lag": nu_star,
            "composite_residual": composite,
        })


@dataclass(eq=False)
class CrossValidationResult:
    """Leave-one-location-out scores per candidate h"""
    step: int
    h_grid: np.ndarray
    scores: np.ndarray
    evaluated: np.ndarray
    skipped: np.ndarray
    h: int
    h1: Optional[int] = None

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "step": self.step,
            "h": self.h_grid,
            "cv_score": self.scores,
            "evaluated_observations": self.evaluated,
            "skipped_locations": self.skipped,
            "chosen": self.h_grid == self.h,
        })


def coordinate_columns(panel: PanelDataset) -> Tuple[str, ...]:
    return ("latitude", "longitude")[: panel.dim]
