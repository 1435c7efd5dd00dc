"""
Adaptive k-nearest-neighbor Gaussian kernel
===========================================

Bandwidths are the h-th order statistic of the distances from a target location to every
firm-year observation (co-located observations count, ties share a distance). Weights are
the standard normal density of distance / bandwidth.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import norm

from locprod.errors import BandwidthError, DimensionMismatchError
from locprod.models.panel import PanelDataset


class KernelFamily(Enum):
    GAUSSIAN = "gaussian"


class KernelSpec(BaseModel):
    """Smoothing configuration: neighbor count h (firm-year observations) and kernel"""

    model_config = ConfigDict(frozen=True)

    h: int = Field(ge=1)
    kernel: KernelFamily = KernelFamily.GAUSSIAN


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Per-observation weights for one target location"""
    target: Tuple[float, ...]
    bandwidth: float
    weights: np.ndarray
    degenerate: bool = False


Points = Union[PanelDataset, np.ndarray]


def distance(a, b) -> float:
    """Euclidean distance between two coordinate vectors"""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise DimensionMismatchError(f"coordinate dimensions differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def distances(s, coords: np.ndarray) -> np.ndarray:
    """Distances from s to every row of coords"""
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords.reshape(-1, 1)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if s.shape[0] != coords.shape[1]:
        raise DimensionMismatchError(
            f"target has dimension {s.shape[0]}, locations have dimension {coords.shape[1]}"
        )
    return np.sqrt(np.sum((coords - s) ** 2, axis=1))


def _support(points: Points) -> Tuple[np.ndarray, np.ndarray]:
    """Unique coordinates and observation counts at each"""
    if isinstance(points, PanelDataset):
        return points.locations, points.location_counts
    coords = np.asarray(points, dtype=float)
    if coords.ndim == 1:
        coords = coords.reshape(-1, 1)
    return coords, np.ones(coords.shape[0], dtype=np.int64)


def _order_statistic(d: np.ndarray, counts: np.ndarray, h: int) -> float:
    total = int(counts.sum())
    if not 1 <= h <= total:
        raise BandwidthError(f"neighbor count h={h} outside [1, {total}]", h=h, n=total)
    order = np.argsort(d, kind="stable")
    cumulative = np.cumsum(counts[order])
    radius = float(d[order][np.searchsorted(cumulative, h, side="left")])
    if radius == 0.0:
        # h or more observations sit on the target: escalate to the nearest distinct location
        positive = d[(d > 0) & (counts > 0)]
        radius = float(positive.min()) if positive.size else 0.0
    return radius


def adaptive_bandwidth(s, points: Points, h: int) -> float:
    """
    R_h(s): h-th smallest distance from s over all observations.

    Returns 0.0 only when every observation coincides with s (uniform weights follow).
    """
    coords, counts = _support(points)
    return _order_statistic(distances(s, coords), counts, h)


def kernel_weights(
    s,
    panel: PanelDataset,
    spec: KernelSpec,
    holdout: Optional[int] = None,
) -> WeightVector:
    """
    Gaussian weights exp(-u^2/2)/sqrt(2 pi), u = ||S_i - s|| / R_h(s).

    Args:
        s: target coordinates
        panel: observations to weight
        spec: neighbor count and kernel family
        holdout: index of a unique location whose observations get zero weight and are
            not counted by the bandwidth (leave-one-location-out fits)
    """
    d_loc = distances(s, panel.locations)
    counts = panel.location_counts.copy()
    if holdout is not None:
        counts[holdout] = 0
    radius = _order_statistic(d_loc, counts, spec.h)
    if radius > 0:
        w_loc = norm.pdf(d_loc / radius)
    else:
        w_loc = np.ones(d_loc.shape)
    if holdout is not None:
        w_loc[holdout] = 0.0
    return WeightVector(
        target=tuple(float(x) for x in np.atleast_1d(s)),
        bandwidth=radius,
        weights=w_loc[panel.location_index],
        degenerate=radius == 0.0,
    )
