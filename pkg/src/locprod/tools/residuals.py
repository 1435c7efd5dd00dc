"""
Residual models with analytic Jacobians
=======================================

ProxiedProductionModel - second-step proxied production function
    y* = F(x_t)'b + rho0 + rho1 [nu*_{t-1} - F(x_{t-1})'b] + rho2'G_{t-1} + error
    F is the quasi-fixed input basis: (k, l) for Cobb-Douglas,
    (k, k^2/2, l, l^2/2, kl) for translog. For fixed rho1 the model is linear in
    (b, rho0, rho2), which the profiled solver exploits.

MaterialShareModel - translog first step
    v = ln(a0 + aMM m + aKM k + aLM l) + error
"""

from enum import Enum
from typing import List, Optional, Tuple

import numpy as np


class TechnologyForm(Enum):
    COBB_DOUGLAS = "cobb-douglas"
    TRANSLOG = "translog"


def fixed_input_names(form: TechnologyForm, has_labor: bool) -> List[str]:
    if form is TechnologyForm.COBB_DOUGLAS:
        return ["beta_K", "beta_L"] if has_labor else ["beta_K"]
    if has_labor:
        return ["beta_K", "beta_KK", "beta_L", "beta_LL", "beta_KL"]
    return ["beta_K", "beta_KK"]


def fixed_input_basis(k: np.ndarray, l: Optional[np.ndarray], form: TechnologyForm) -> np.ndarray:
    """Columns of F(x) in the order of ``fixed_input_names``"""
    k = np.asarray(k, dtype=float)
    if form is TechnologyForm.COBB_DOUGLAS:
        cols = [k] if l is None else [k, l]
    elif l is None:
        cols = [k, 0.5 * k ** 2]
    else:
        cols = [k, 0.5 * k ** 2, l, 0.5 * l ** 2, k * l]
    return np.column_stack(cols)


def material_names(form: TechnologyForm, has_labor: bool) -> List[str]:
    if form is TechnologyForm.COBB_DOUGLAS:
        return ["beta_M"]
    return ["beta_M", "beta_MM", "beta_KM", "beta_LM"] if has_labor else ["beta_M", "beta_MM", "beta_KM"]


def material_basis(k: np.ndarray, l: Optional[np.ndarray], m: np.ndarray) -> np.ndarray:
    """Regressors of the material elasticity: (1, m, k[, l])"""
    cols = [np.ones_like(m), m, k]
    if l is not None:
        cols.append(l)
    return np.column_stack(cols)


# =============================================================================
# SECOND STEP
# =============================================================================

class ProxiedProductionModel:
    """Second-step residual model; parameter order (b..., rho0, rho1, rho2...)"""

    def __init__(
        self,
        response: np.ndarray,
        basis_current: np.ndarray,
        basis_lagged: np.ndarray,
        nu_lagged: np.ndarray,
        controls_lagged: Optional[np.ndarray] = None,
    ):
        self.response = np.asarray(response, dtype=float)
        self.basis_current = np.asarray(basis_current, dtype=float)
        self.basis_lagged = np.asarray(basis_lagged, dtype=float)
        self.nu_lagged = np.asarray(nu_lagged, dtype=float)
        n = self.response.size
        if controls_lagged is None:
            controls_lagged = np.empty((n, 0))
        self.controls_lagged = np.asarray(controls_lagged, dtype=float).reshape(n, -1)
        self.n_basis = self.basis_current.shape[1]
        self.n_controls = self.controls_lagged.shape[1]

    @property
    def n_params(self) -> int:
        return self.n_basis + 2 + self.n_controls

    @property
    def n_rows(self) -> int:
        return int(self.response.size)

    def split(self, theta: np.ndarray) -> Tuple[np.ndarray, float, float, np.ndarray]:
        p = self.n_basis
        return theta[:p], float(theta[p]), float(theta[p + 1]), theta[p + 2:]

    def fitted(self, theta: np.ndarray) -> np.ndarray:
        b, rho0, rho1, rho2 = self.split(np.asarray(theta, dtype=float))
        omega_lag = self.nu_lagged - self.basis_lagged @ b
        return self.basis_current @ b + rho0 + rho1 * omega_lag + self.controls_lagged @ rho2

    def residuals(self, theta: np.ndarray) -> np.ndarray:
        return self.response - self.fitted(theta)

    def fitted_rowwise(self, theta_rows: np.ndarray) -> np.ndarray:
        """Right-hand side with a separate parameter vector per row (each row's own location)"""
        p = self.n_basis
        b = theta_rows[:, :p]
        rho0, rho1 = theta_rows[:, p], theta_rows[:, p + 1]
        rho2 = theta_rows[:, p + 2:]
        omega_lag = self.nu_lagged - np.sum(self.basis_lagged * b, axis=1)
        return (
            np.sum(self.basis_current * b, axis=1) + rho0 + rho1 * omega_lag
            + np.sum(self.controls_lagged * rho2, axis=1)
        )

    def jacobian(self, theta: np.ndarray) -> np.ndarray:
        b, _, rho1, _ = self.split(np.asarray(theta, dtype=float))
        n = self.n_rows
        return np.column_stack([
            -(self.basis_current - rho1 * self.basis_lagged),
            -np.ones(n),
            -(self.nu_lagged - self.basis_lagged @ b),
            -self.controls_lagged,
        ])

    def design_at(self, rho1: float) -> Tuple[np.ndarray, np.ndarray]:
        """Linear design (F_t - rho1 F_{t-1}, 1, G) and offset rho1 nu* for fixed rho1"""
        design = np.column_stack([
            self.basis_current - rho1 * self.basis_lagged,
            np.ones(self.n_rows),
            self.controls_lagged,
        ])
        return design, rho1 * self.nu_lagged

    def assemble(self, rho1: float, inner: np.ndarray) -> np.ndarray:
        """Full parameter vector from rho1 and the inner linear coefficients (b, rho0, rho2)"""
        p = self.n_basis
        return np.concatenate([inner[:p + 1], [rho1], inner[p + 1:]])


# =============================================================================
# TRANSLOG FIRST STEP
# =============================================================================

class MaterialShareModel:
    """v = ln(X a) + error with X = (1, m, k[, l])"""

    _floor = 1e-300

    def __init__(self, share: np.ndarray, design: np.ndarray):
        self.share = np.asarray(share, dtype=float)
        self.design = np.asarray(design, dtype=float)

    @property
    def n_params(self) -> int:
        return self.design.shape[1]

    def elasticity(self, a: np.ndarray) -> np.ndarray:
        return self.design @ np.asarray(a, dtype=float)

    def residuals(self, a: np.ndarray) -> np.ndarray:
        return self.share - np.log(np.maximum(self.elasticity(a), self._floor))

    def jacobian(self, a: np.ndarray) -> np.ndarray:
        z = np.maximum(self.elasticity(a), self._floor)
        return -self.design / z[:, None]


# =============================================================================
# MATERIAL TERMS
# =============================================================================

def material_terms(coef: np.ndarray, k: np.ndarray, l: Optional[np.ndarray], m: np.ndarray) -> np.ndarray:
    """Material part of ln F with per-row coefficients (beta_M[, beta_MM, beta_KM, beta_LM])"""
    coef = np.atleast_2d(coef)
    out = coef[:, 0] * m
    if coef.shape[1] > 1:
        out = out + 0.5 * coef[:, 1] * m ** 2 + coef[:, 2] * k * m
        if l is not None:
            out = out + coef[:, 3] * l * m
    return out


def material_elasticity(coef: np.ndarray, k: np.ndarray, l: Optional[np.ndarray], m: np.ndarray) -> np.ndarray:
    """d ln F / d m with per-row coefficients"""
    coef = np.atleast_2d(coef)
    basis = material_basis(np.asarray(k, dtype=float), l, np.asarray(m, dtype=float))
    return np.sum(coef * basis[:, :coef.shape[1]], axis=1)
