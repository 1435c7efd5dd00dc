"""
Panel data models
=================

Firm-year observations with logged inputs and output, productivity controls, location
coordinates, period price ratios and the derived log material share.

The dataset is column-oriented (one numpy array per field) and immutable after
construction: every array is flagged read-only, and derived panels (bootstrap shares,
location subsets) are new objects.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from locprod.errors import DimensionMismatchError, PanelIntegrityError


# =============================================================================
# SCHEMA
# =============================================================================

class PanelSchema(BaseModel):
    """Column-name map: canonical name -> source column.

    ``labor`` and ``longitude`` may be null (two-input technology, 1-D locations).
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    firm: str = "firm_id"
    period: str = "period"
    output: str = "y"
    capital: str = "k"
    labor: Optional[str] = "l"
    materials: str = "m"
    latitude: str = "latitude"
    longitude: Optional[str] = "longitude"
    controls: List[str] = Field(default_factory=list)
    materials_cost: Optional[str] = None
    revenue: Optional[str] = None
    price_materials: Optional[str] = None
    price_output: Optional[str] = None
    price_ratio: Optional[str] = None
    share: Optional[str] = None

    @classmethod
    def canonical(cls, has_labor: bool, dim: int, controls: List[str]) -> "PanelSchema":
        """Schema of the files written by ``write_panel``"""
        return cls(
            labor="l" if has_labor else None,
            longitude="longitude" if dim == 2 else None,
            controls=list(controls),
            price_ratio="price_ratio",
            share="v",
        )


# =============================================================================
# OBSERVATIONS
# =============================================================================

@dataclass(frozen=True)
class PanelObservation:
    """One firm-year row (logged values)"""
    firm_id: Any
    period: int
    y: float
    k: float
    l: Optional[float]
    m: float
    G: Tuple[float, ...]
    S: Tuple[float, ...]
    v: float
    price_ratio: float


@dataclass(frozen=True)
class UniqueLocation:
    """A deduplicated coordinate vector and the observations located there"""
    coords: Tuple[float, ...]
    members: np.ndarray


@dataclass(frozen=True)
class LaggedRow:
    current: PanelObservation
    lagged: PanelObservation


@dataclass(frozen=True, eq=False)
class LaggedRows:
    """Index pairs (t, t-1) of the same firm; the fitting sample of the second step"""
    current: np.ndarray
    lagged: np.ndarray

    def __len__(self) -> int:
        return int(self.current.size)

    def rows(self, panel: "PanelDataset") -> List[LaggedRow]:
        return [
            LaggedRow(panel.observation(c), panel.observation(p))
            for c, p in zip(self.current, self.lagged)
        ]


# =============================================================================
# DATASET
# =============================================================================

def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Validated firm-level panel"""
    firm_id: np.ndarray
    period: np.ndarray
    y: np.ndarray
    k: np.ndarray
    l: Optional[np.ndarray]
    m: np.ndarray
    controls: np.ndarray
    coords: np.ndarray
    price_ratio: np.ndarray
    v: np.ndarray
    control_names: Tuple[str, ...] = ()
    locations: np.ndarray = field(default=None, repr=False)
    location_index: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_arrays(
        cls,
        firm_id,
        period,
        y,
        k,
        l,
        m,
        coords,
        v,
        price_ratio=None,
        controls=None,
        control_names=(),
    ) -> "PanelDataset":
        """Build and validate a panel from column arrays"""
        n = len(firm_id)
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 1:
            coords = coords.reshape(-1, 1)
        if controls is None:
            controls = np.empty((n, 0))
        controls = np.asarray(controls, dtype=float).reshape(n, -1)
        if price_ratio is None:
            price_ratio = np.zeros(n)
        columns = {"period": period, "y": y, "k": k, "m": m, "v": v, "price_ratio": price_ratio}
        if l is not None:
            columns["l"] = l
        for name, col in columns.items():
            if len(col) != n:
                raise DimensionMismatchError(f"column '{name}' has {len(col)} rows, expected {n}")
        if coords.shape[0] != n:
            raise DimensionMismatchError(f"coordinates have {coords.shape[0]} rows, expected {n}")
        if controls.shape[1] != len(control_names):
            control_names = tuple(f"G{j + 1}" for j in range(controls.shape[1]))

        firm_id = np.asarray(firm_id, dtype=object)
        period = np.asarray(period, dtype=np.int64)
        _check_integrity(firm_id, period, coords)

        locations, inverse = np.unique(coords, axis=0, return_inverse=True)
        return cls(
            firm_id=_frozen(firm_id),
            period=_frozen(period),
            y=_frozen(np.asarray(y, dtype=float)),
            k=_frozen(np.asarray(k, dtype=float)),
            l=None if l is None else _frozen(np.asarray(l, dtype=float)),
            m=_frozen(np.asarray(m, dtype=float)),
            controls=_frozen(controls),
            coords=_frozen(coords),
            price_ratio=_frozen(np.asarray(price_ratio, dtype=float)),
            v=_frozen(np.asarray(v, dtype=float)),
            control_names=tuple(control_names),
            locations=_frozen(locations),
            location_index=_frozen(np.asarray(inverse).reshape(-1).astype(np.int64)),
        )

    # -- shape -----------------------------------------------------------------

    def __len__(self) -> int:
        return int(self.y.size)

    @property
    def n_obs(self) -> int:
        return len(self)

    @property
    def n_firms(self) -> int:
        return len(pd.unique(self.firm_id))

    @property
    def n_locations(self) -> int:
        return int(self.locations.shape[0])

    @property
    def dim(self) -> int:
        return int(self.coords.shape[1])

    @property
    def has_labor(self) -> bool:
        return self.l is not None

    @property
    def control_dimension(self) -> int:
        return int(self.controls.shape[1])

    @property
    def location_counts(self) -> np.ndarray:
        return np.bincount(self.location_index, minlength=self.n_locations)

    @property
    def unique_locations(self) -> List[UniqueLocation]:
        members = [np.flatnonzero(self.location_index == j) for j in range(self.n_locations)]
        return [UniqueLocation(tuple(self.locations[j]), members[j]) for j in range(self.n_locations)]

    @property
    def price_series(self) -> pd.Series:
        """Per-period ln(P^M_t / P^Y_t)"""
        frame = pd.DataFrame({"period": self.period, "price_ratio": self.price_ratio})
        return frame.groupby("period")["price_ratio"].first()

    # -- access ----------------------------------------------------------------

    def observation(self, i: int) -> PanelObservation:
        return PanelObservation(
            firm_id=self.firm_id[i],
            period=int(self.period[i]),
            y=float(self.y[i]),
            k=float(self.k[i]),
            l=None if self.l is None else float(self.l[i]),
            m=float(self.m[i]),
            G=tuple(float(g) for g in self.controls[i]),
            S=tuple(float(s) for s in self.coords[i]),
            v=float(self.v[i]),
            price_ratio=float(self.price_ratio[i]),
        )

    def __iter__(self) -> Iterator[PanelObservation]:
        for i in range(len(self)):
            yield self.observation(i)

    def labor_or_zeros(self) -> np.ndarray:
        return self.l if self.l is not None else np.zeros_like(self.k)

    # -- derived panels --------------------------------------------------------

    def with_share(self, v: np.ndarray) -> "PanelDataset":
        """Same panel with the log share replaced (bootstrap replicates)"""
        v = np.asarray(v, dtype=float)
        if v.shape != self.v.shape:
            raise DimensionMismatchError(f"share has shape {v.shape}, expected {self.v.shape}")
        return replace(self, v=_frozen(v))

    def subset(self, mask: np.ndarray) -> "PanelDataset":
        """Observations selected by a boolean mask, locations recomputed"""
        mask = np.asarray(mask, dtype=bool)
        return PanelDataset.from_arrays(
            firm_id=self.firm_id[mask],
            period=self.period[mask],
            y=self.y[mask],
            k=self.k[mask],
            l=None if self.l is None else self.l[mask],
            m=self.m[mask],
            coords=self.coords[mask],
            v=self.v[mask],
            price_ratio=self.price_ratio[mask],
            controls=self.controls[mask],
            control_names=self.control_names,
        )

    def to_frame(self) -> pd.DataFrame:
        """Canonical column layout"""
        data: Dict[str, Any] = {"firm_id": self.firm_id, "period": self.period, "y": self.y, "k": self.k}
        if self.l is not None:
            data["l"] = self.l
        data["m"] = self.m
        data["latitude"] = self.coords[:, 0]
        if self.dim == 2:
            data["longitude"] = self.coords[:, 1]
        for j, name in enumerate(self.control_names):
            data[name] = self.controls[:, j]
        data["price_ratio"] = self.price_ratio
        data["v"] = self.v
        return pd.DataFrame(data)


def _check_integrity(firm_id: np.ndarray, period: np.ndarray, coords: np.ndarray) -> None:
    if coords.shape[1] not in (1, 2):
        raise DimensionMismatchError(f"coordinates must be 1-D or 2-D, got {coords.shape[1]} columns")
    frame = pd.DataFrame({"firm": firm_id, "period": period})
    dup = frame.duplicated(keep=False)
    if dup.any():
        first = frame[dup].iloc[0]
        raise PanelIntegrityError(
            f"duplicate observation for firm {first['firm']!r}, period {int(first['period'])}",
            firm=first["firm"], period=int(first["period"]),
        )
    coord_frame = pd.DataFrame(coords, columns=[f"s{j}" for j in range(coords.shape[1])])
    coord_frame["firm"] = firm_id
    moving = coord_frame.groupby("firm", sort=False).nunique().max(axis=1) > 1
    if moving.any():
        firm = moving[moving].index[0]
        raise PanelIntegrityError(f"firm {firm!r} has time-varying coordinates", firm=firm)
