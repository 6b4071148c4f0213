"""Sensing-cell geometry and spatial correlation coefficients.

A world is a set of point "grids" (streets or blocks reduced to station
coordinates).  A report made for one grid can be reused for a nearby grid,
weighted by a Gaussian kernel of the great-circle distance with a hard
cutoff beyond which the correlation is exactly zero.  The sparse table of
nonzero coefficients is precomputed once per world and shared read-only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class Grid:
    """One sensing cell, identified by id and located at a point."""

    id: str
    latitude: float
    longitude: float
    label: str | None = None

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"grid {self.id!r}: latitude {self.latitude} out of [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"grid {self.id!r}: longitude {self.longitude} out of [-180, 180]")


@dataclass(frozen=True)
class SpatialParams:
    """Gaussian kernel width and hard cutoff distance, both in kilometers."""

    omega_km: float = 2.0
    cutoff_km: float = 5.0

    def __post_init__(self):
        if self.omega_km <= 0:
            raise ValueError(f"omega_km must be > 0, got {self.omega_km}")
        if self.cutoff_km <= 0:
            raise ValueError(f"cutoff_km must be > 0, got {self.cutoff_km}")


def geographical_distance(a: Grid, b: Grid) -> float:
    """Great-circle (haversine) distance between two grids in kilometers."""
    lat1, lon1, lat2, lon2 = map(
        math.radians, (a.latitude, a.longitude, b.latitude, b.longitude)
    )
    s_lat = math.sin((lat2 - lat1) / 2.0)
    s_lon = math.sin((lon2 - lon1) / 2.0)
    h = s_lat * s_lat + math.cos(lat1) * math.cos(lat2) * s_lon * s_lon
    return 2.0 * EARTH_RADIUS_KM * math.atan2(math.sqrt(h), math.sqrt(1.0 - h))


def logical_distance(distance_km: float, params: SpatialParams) -> float:
    """Correlation coefficient for two grids at the given distance.

    Gaussian kernel exp(-d^2 / (2 omega^2)) below the cutoff, exactly zero
    at and beyond it.  Zero distance yields 1, so a grid's own reports are
    fully trusted.
    """
    if distance_km < 0:
        raise ValueError(f"distance must be >= 0, got {distance_km}")
    if distance_km < params.cutoff_km:
        x = distance_km / params.omega_km
        return math.exp(-0.5 * x * x)
    return 0.0


class ThetaTable:
    """Sparse symmetric table of pairwise correlation coefficients.

    Only nonzero entries are stored; an absent pair means zero.  The
    diagonal is always 1.  Immutable after construction and safe for
    concurrent reads.
    """

    def __init__(self, rows: Mapping[str, Mapping[str, float]]):
        self._rows = {g: dict(r) for g, r in rows.items()}

    @classmethod
    def build(cls, grids: Sequence[Grid], params: SpatialParams) -> "ThetaTable":
        if not grids:
            raise ValueError("at least one grid is required")
        seen = set()
        for g in grids:
            if g.id in seen:
                raise ValueError(f"duplicate grid id {g.id!r}")
            seen.add(g.id)
        rows: dict[str, dict[str, float]] = {g.id: {g.id: 1.0} for g in grids}
        for i, a in enumerate(grids):
            for b in grids[i + 1 :]:
                theta = logical_distance(geographical_distance(a, b), params)
                if theta > 0.0:
                    rows[a.id][b.id] = theta
                    rows[b.id][a.id] = theta
        return cls(rows)

    @property
    def grid_ids(self) -> list[str]:
        return sorted(self._rows)

    def theta(self, origin: str, target: str) -> float:
        return self._rows.get(origin, {}).get(target, 0.0)

    def row(self, origin: str) -> Mapping[str, float]:
        """All nonzero coefficients for reports made at `origin`."""
        try:
            return self._rows[origin]
        except KeyError:
            raise ValueError(f"unknown grid id {origin!r}") from None

    def __contains__(self, grid_id: str) -> bool:
        return grid_id in self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def write_csv(self, path) -> None:
        """Dump stored entries as (origin_id, target_id, theta) rows."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["origin_id", "target_id", "theta"])
            for origin in sorted(self._rows):
                for target in sorted(self._rows[origin]):
                    writer.writerow([origin, target, repr(self._rows[origin][target])])
