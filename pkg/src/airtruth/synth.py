"""Ground-truth ingestion and synthetic world generation.

The simulator consumes per-grid truth series at the sensing-cycle
resolution.  Those come either from a long-form station CSV (hourly
readings, interpolated down to 15-minute cycles) or from a built-in
generator that produces a spatially smooth, slowly drifting field so the
solver's correlation assumptions hold.

Traffic follows a long-tail pattern: expected pass-by counts per grid are
rank-weighted by a Zipf law and realized per cycle as independent Poisson
draws; per-grid vehicle lists are sampled without replacement.  Each
vehicle carries a fixed multiplicative reliability factor drawn from a
truncated normal, and observations add small Gaussian reading noise on
top of the factor-scaled truth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import streams
from .geo import Grid
from .solvers import Observation

INTERPOLATION_STEPS = 4  # hourly readings -> 15-minute cycles
MAX_GAP_HOURS = 4


class DatasetError(ValueError):
    """The station CSV is malformed or has unfillable gaps."""


@dataclass(frozen=True)
class ReliabilityParams:
    """Truncated-normal parameters in (upper, lower, mean, sigma) order."""

    upper: float
    lower: float
    mean: float
    sigma: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"lower {self.lower} exceeds upper {self.upper}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not self.lower <= self.mean <= self.upper:
            raise ValueError(f"mean {self.mean} outside [{self.lower}, {self.upper}]")


GOOD_RELIABILITY = ReliabilityParams(upper=1.5, lower=0.5, mean=1.0, sigma=0.5)
BAD_RELIABILITY = ReliabilityParams(upper=2.5, lower=1.5, mean=2.0, sigma=0.5)


@dataclass(frozen=True)
class WorldParams:
    """Size and statistics of the simulated world.

    `expected_passbys` is the total expected number of vehicle-grid
    encounters per cycle across all grids (None means 4 per grid, which
    keeps fabricated tail-grid reports below the default dense-grid
    threshold).  The first floor(bad_fraction * n) vehicles are the bad
    ones.
    """

    n: int = 500
    m: int = 34
    cycles: int = 672
    zipf_exponent: float = 1.0
    expected_passbys: float | None = None
    good: ReliabilityParams = GOOD_RELIABILITY
    bad: ReliabilityParams = BAD_RELIABILITY
    bad_fraction: float = 0.0
    noise_variance: float = 0.2

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or self.cycles < 1:
            raise ValueError("n, m and cycles must all be >= 1")
        if not 0.0 <= self.bad_fraction <= 1.0:
            raise ValueError(f"bad_fraction must be in [0, 1], got {self.bad_fraction}")
        if self.noise_variance < 0:
            raise ValueError(f"noise_variance must be >= 0, got {self.noise_variance}")
        if self.expected_passbys is not None and self.expected_passbys < 0:
            raise ValueError("expected_passbys must be >= 0")

    @property
    def total_passbys(self) -> float:
        return 4.0 * self.m if self.expected_passbys is None else self.expected_passbys

    @property
    def bad_count(self) -> int:
        return int(self.bad_fraction * self.n)


@dataclass(frozen=True)
class TruthSeries:
    """Real truths of one grid, one value per sensing cycle."""

    grid_id: str
    values: tuple[float, ...]


# ---------------------------------------------------------------------------
# Dataset ingestion
# ---------------------------------------------------------------------------

_COLUMNS = ("station_id", "lat", "lon", "timestamp", "aqi")


def load_aqi_dataset(path) -> tuple[list[Grid], dict[str, TruthSeries]]:
    """Load a long-form hourly station CSV and interpolate to cycles.

    Expected header: station_id, lat, lon, timestamp, aqi.  Timestamps
    must fall on whole hours; gaps (or blank readings) of up to four
    hours are filled linearly, anything longer is an error.  All stations
    must cover the same hourly range.  Three evenly spaced values are
    inserted between consecutive hourly readings, so H hourly values
    become 4*(H-1)+1 cycles.
    """
    stations: dict[str, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if [h.strip() for h in header] != list(_COLUMNS):
            raise DatasetError(f"{path}: line 1: expected header {','.join(_COLUMNS)}")
        for n, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(_COLUMNS):
                raise DatasetError(f"{path}: line {n}: expected {len(_COLUMNS)} fields")
            sid, lat, lon, stamp, aqi = (c.strip() for c in row)
            try:
                lat_f, lon_f = float(lat), float(lon)
                when = datetime.fromisoformat(stamp)
            except ValueError as exc:
                raise DatasetError(f"{path}: line {n}: {exc}") from None
            if when.minute or when.second or when.microsecond:
                raise DatasetError(f"{path}: line {n}: timestamp {stamp} not on the hour")
            value: float | None
            if aqi == "" or aqi.lower() in ("nan", "na"):
                value = None
            else:
                try:
                    value = float(aqi)
                except ValueError:
                    raise DatasetError(f"{path}: line {n}: bad aqi value {aqi!r}") from None
                if math.isnan(value):
                    value = None
                elif value < 0:
                    raise DatasetError(f"{path}: line {n}: negative aqi {aqi}")
            st = stations.setdefault(sid, {"lat": lat_f, "lon": lon_f, "readings": {}})
            if (st["lat"], st["lon"]) != (lat_f, lon_f):
                raise DatasetError(f"{path}: line {n}: station {sid} moved coordinates")
            if when in st["readings"]:
                raise DatasetError(f"{path}: line {n}: duplicate timestamp for {sid}")
            st["readings"][when] = value
    if not stations:
        raise DatasetError(f"{path}: no data rows")

    start = min(min(st["readings"]) for st in stations.values())
    end = max(max(st["readings"]) for st in stations.values())
    hours = int((end - start) / timedelta(hours=1)) + 1
    timeline = [start + timedelta(hours=i) for i in range(hours)]

    grids: list[Grid] = []
    series: dict[str, TruthSeries] = {}
    for sid in stations:  # keep file order as the traffic rank order
        st = stations[sid]
        hourly = _fill_gaps(sid, st["readings"], timeline)
        grids.append(Grid(id=sid, latitude=st["lat"], longitude=st["lon"]))
        series[sid] = TruthSeries(grid_id=sid, values=tuple(_interpolate(hourly)))
    return grids, series


def _fill_gaps(sid: str, readings: Mapping[datetime, float | None], timeline) -> list[float]:
    known = [(when, v) for when, v in sorted(readings.items()) if v is not None]
    if not known:
        raise DatasetError(f"station {sid}: no usable readings")
    if known[0][0] != timeline[0] or known[-1][0] != timeline[-1]:
        raise DatasetError(
            f"station {sid}: coverage {known[0][0]}..{known[-1][0]} does not span "
            f"{timeline[0]}..{timeline[-1]}"
        )
    by_time = dict(known)
    out: list[float] = []
    idx = 0
    anchors = [t for t, _ in known]
    for when in timeline:
        if when in by_time:
            out.append(by_time[when])
            if anchors[idx] != when:
                idx = anchors.index(when)
            continue
        while anchors[idx + 1] < when:
            idx += 1
        left, right = anchors[idx], anchors[idx + 1]
        gap = int((right - left) / timedelta(hours=1))
        if gap > MAX_GAP_HOURS:
            raise DatasetError(
                f"station {sid}: gap of {gap} hours at {left} exceeds {MAX_GAP_HOURS}"
            )
        frac = (when - left) / (right - left)
        out.append(by_time[left] + (by_time[right] - by_time[left]) * frac)
    return out


def _interpolate(hourly: Sequence[float]) -> list[float]:
    out: list[float] = []
    for a, b in zip(hourly, hourly[1:]):
        out.append(a)
        for k in range(1, INTERPOLATION_STEPS):
            out.append(a + (b - a) * k / INTERPOLATION_STEPS)
    out.append(hourly[-1])
    return out


# ---------------------------------------------------------------------------
# Synthetic world
# ---------------------------------------------------------------------------

_CENTER_LAT = 39.9
_CENTER_LON = 116.4
_SPACING_KM = 2.2
_KM_PER_DEG_LAT = 110.574
_KM_PER_DEG_LON = 111.320


def synth_grids(m: int, seed: int) -> list[Grid]:
    """A jittered lattice of m grids around a city center (~2 km spacing)."""
    side = math.ceil(math.sqrt(m))
    gen = streams.rng(seed, "grids")
    jitter = gen.uniform(-0.3, 0.3, size=(m, 2))
    grids = []
    width = len(str(m))
    for i in range(m):
        row, col = divmod(i, side)
        x_km = (col - (side - 1) / 2.0) * _SPACING_KM + jitter[i, 0]
        y_km = (row - (side - 1) / 2.0) * _SPACING_KM + jitter[i, 1]
        lat = _CENTER_LAT + y_km / _KM_PER_DEG_LAT
        lon = _CENTER_LON + x_km / (_KM_PER_DEG_LON * math.cos(math.radians(_CENTER_LAT)))
        grids.append(Grid(id=f"g{i + 1:0{width}d}", latitude=lat, longitude=lon))
    return grids


def synth_truth_series(
    grids: Sequence[Grid], cycles: int, seed: int
) -> dict[str, TruthSeries]:
    """Mean-reverting truth field, clipped to [20, 100].

    Grid base levels vary smoothly with position, and per-cycle
    innovations share a common component, so nearby grids stay similar in
    level and move together; the mean-reversion factor keeps lag-1
    autocorrelation near 0.98.
    """
    gen = streams.rng(seed, "truths")
    m = len(grids)
    x = np.array(
        [
            (g.longitude - _CENTER_LON) * _KM_PER_DEG_LON * math.cos(math.radians(_CENTER_LAT))
            for g in grids
        ]
    )
    y = np.array([(g.latitude - _CENTER_LAT) * _KM_PER_DEG_LAT for g in grids])
    base = 65.0 + 12.0 * np.sin(x / 6.0) + 8.0 * np.cos(y / 7.0) + gen.normal(0.0, 1.5, m)
    common = gen.normal(0.0, 0.8, cycles)
    idio = gen.normal(0.0, 0.4, (cycles, m))

    values = np.empty((cycles, m))
    level = base.copy()
    for t in range(cycles):
        level = level + 0.02 * (base - level) + common[t] + idio[t]
        np.clip(level, 20.0, 100.0, out=level)
        values[t] = level
    return {
        g.id: TruthSeries(grid_id=g.id, values=tuple(float(v) for v in values[:, i]))
        for i, g in enumerate(grids)
    }


def zipf_expected_counts(m: int, exponent: float, total: float) -> list[float]:
    """Expected pass-by counts per rank (rank 1 busiest), summing to total."""
    if m < 1:
        raise ValueError("m must be >= 1")
    weights = [(r + 1) ** -exponent for r in range(m)]
    norm = math.fsum(weights)
    return [total * w / norm for w in weights]


def traffic_order(m: int, seed: int) -> list[int]:
    """Traffic rank of each grid index (0 = busiest).

    Busy and quiet grids are interleaved spatially, the way commercial
    streets sit next to residential blocks; without the shuffle, rank
    would follow the lattice and every busy grid would neighbor only
    other busy grids.
    """
    gen = streams.rng(seed, "traffic-order")
    order = list(gen.permutation(m))
    ranks = [0] * m
    for rank, grid_index in enumerate(order):
        ranks[grid_index] = rank
    return ranks


def draw_passersby(
    expected: Sequence[float], n: int, cycle: int, seed: int
) -> list[list[int]]:
    """Realized per-rank vehicle lists for one cycle.

    Counts are independent Poisson draws (capped at n); vehicles are
    sampled without replacement from the fleet 0..n-1.
    """
    gen = streams.rng(seed, "traffic", cycle)
    lists: list[list[int]] = []
    for mean in expected:
        count = min(int(gen.poisson(mean)), n) if mean > 0 else 0
        if count:
            picks = gen.choice(n, size=count, replace=False)
            lists.append(sorted(int(p) for p in picks))
        else:
            lists.append([])
    return lists


def draw_reliability(params: ReliabilityParams, gen: np.random.Generator) -> float:
    """One truncated-normal factor via rejection sampling."""
    if params.sigma == 0:
        return params.mean
    for _ in range(10_000):
        k = gen.normal(params.mean, params.sigma)
        if params.lower <= k <= params.upper:
            return float(k)
    raise RuntimeError("truncated-normal rejection sampling did not terminate")


def assign_reliabilities(world: WorldParams, seed: int) -> tuple[list[float], list[bool]]:
    """Per-vehicle factor and bad flag; the first bad_count vehicles are bad."""
    kappas: list[float] = []
    flags: list[bool] = []
    bad_count = world.bad_count
    for s in range(world.n):
        bad = s < bad_count
        gen = streams.rng(seed, "reliability", s)
        kappas.append(draw_reliability(world.bad if bad else world.good, gen))
        flags.append(bad)
    return kappas, flags


def gen_observation(
    truth: float, kappa: float, noise_variance: float, seed: int, source: int,
    grid_id: str, cycle: int,
) -> float:
    """One reading: factor-scaled truth plus Gaussian noise."""
    z = streams.unit_normal(seed, "obs", source, grid_id, cycle)
    return truth * kappa + math.sqrt(noise_variance) * z


def build_cycle(
    world: WorldParams,
    grids: Sequence[Grid],
    kappas: Sequence[float],
    truths_now: Mapping[str, float],
    expected: Sequence[float],
    cycle: int,
    seed: int,
) -> list[Observation]:
    """All observations of one cycle, one per (vehicle, visited grid)."""
    passers = draw_passersby(expected, world.n, cycle, seed)
    observations: list[Observation] = []
    for grid, sources in zip(grids, passers):
        truth = truths_now[grid.id]
        for s in sources:
            value = gen_observation(
                truth, kappas[s], world.noise_variance, seed, s, grid.id, cycle
            )
            observations.append(
                Observation(source=s, grid_id=grid.id, value=value, cycle=cycle)
            )
    return observations
