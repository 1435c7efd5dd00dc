"""
Run and simulation configuration
================================

RunConfig is loaded from a YAML file (or the ``config`` block of a run manifest) and
overridden by command-line flags. SimConfig holds the synthetic data-generating process.
"""

import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from locprod.models.panel import PanelSchema
from locprod.tools.residuals import TechnologyForm

Bandwidth = Union[int, Literal["cv"]]
Command = Literal["estimate", "cv", "infer", "test-invariance", "decompose", "simulate", "coverage"]


class SimConfig(BaseModel):
    """Synthetic panel design: 1-D grid of locations, capital and materials only"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = Field(default=100, ge=1)
    T: int = Field(default=10, ge=2)
    seed: int = 0
    grid_start: float = 0.50
    grid_step: float = Field(default=0.01, gt=0)
    grid_size: int = Field(default=50, ge=1)
    sigma_eta: float = Field(default=0.07, ge=0)
    sigma_zeta: float = Field(default=0.04, ge=0)
    rho1: float = 0.7
    depreciation: Tuple[float, ...] = (0.05, 0.075, 0.10, 0.125, 0.15)
    k0_low: float = Field(default=10.0, gt=0)
    k0_high: float = Field(default=200.0, gt=0)
    investment_elasticity: float = 0.8
    investment_productivity: float = 0.1
    invariant_truth: bool = False
    h: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "SimConfig":
        if self.k0_high <= self.k0_low:
            raise ValueError("k0_high must exceed k0_low")
        if np.any(self.beta_M(self.grid) >= 1):
            raise ValueError("beta_M must stay below 1 on the location grid")
        return self

    @property
    def grid(self) -> np.ndarray:
        return np.round(self.grid_start + self.grid_step * np.arange(self.grid_size), 10)

    def _at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.invariant_truth:
            return np.full_like(s, float(self.grid.mean()))
        return s

    def beta_K(self, s) -> np.ndarray:
        return 0.2 + 0.1 * self._at(s)

    def beta_M(self, s) -> np.ndarray:
        return 0.4 + 0.1 * np.exp(self._at(s) ** 2)

    def rho0(self, s) -> np.ndarray:
        s = self._at(s)
        return 0.5 + s - s ** 2

    def rho1_at(self, s) -> np.ndarray:
        return np.full_like(np.asarray(s, dtype=float), self.rho1)

    @property
    def theta(self) -> float:
        return math.exp(self.sigma_eta ** 2 / 2)

    @property
    def shortcut_h(self) -> int:
        """0.3 (nT)^(4/5), rounded"""
        return max(1, int(round(0.3 * (self.n * self.T) ** 0.8)))

    @property
    def bandwidth(self) -> int:
        return self.h or self.shortcut_h


class RunConfig(BaseModel):
    """One CLI run; every field lands in the manifest"""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    command: Optional[Command] = None
    input: Optional[Path] = None
    schema_map: PanelSchema = Field(default_factory=PanelSchema, alias="schema")
    log_transform: bool = False
    delimiter: str = ","
    tech: TechnologyForm = TechnologyForm.COBB_DOUGLAS

    h1: Optional[Bandwidth] = None
    h2: Optional[Bandwidth] = None
    h_grid: Optional[List[int]] = None
    invariant: bool = False

    B: int = Field(default=199, gt=0)
    Q: int = Field(default=100, gt=0)
    alpha: float = Field(default=0.05, gt=0, le=1)
    seed: int = 0
    workers: int = 1
    output: Path = Path("runs/latest")

    functionals: List[str] = Field(default_factory=list)
    pooled: bool = True
    benchmark: Optional[int] = None
    bias_correct: bool = True
    sidedness: Literal["two-sided", "lower", "upper"] = "two-sided"
    store_full_draws: bool = False

    simulation: SimConfig = Field(default_factory=SimConfig)
    sizes: List[int] = Field(default_factory=list)
    estimator: Literal["kernel", "sample-splitting"] = "kernel"
    coverage_locations: List[float] = Field(default_factory=lambda: [0.65, 0.75, 0.85])
    power_offsets: List[float] = Field(default_factory=lambda: [-0.1, -0.05, -0.025, 0.0, 0.025, 0.05, 0.1])

    @field_validator("h_grid")
    @classmethod
    def _grid(cls, value: Optional[List[int]]) -> Optional[List[int]]:
        if value is not None and (not value or min(value) < 1):
            raise ValueError("h_grid must be a non-empty list of positive integers")
        return value

    @field_validator("h1", "h2")
    @classmethod
    def _bandwidth(cls, value: Optional[Bandwidth]) -> Optional[Bandwidth]:
        if isinstance(value, int) and value < 1:
            raise ValueError("neighbor counts must be positive")
        return value

    def manifest_block(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)
