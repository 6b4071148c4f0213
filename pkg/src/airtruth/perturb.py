"""Local report perturbation: trajectory hiding plus value noise.

Before uploading plaintext observation lists, a vehicle applies two
layers of randomness.  Grid perturbation drops each real entry with
probability p1 and, for every grid left uncovered, fabricates an entry
with probability p2 by reading the previously published truth and adding
Laplace noise.  Value perturbation then adds independent Laplace noise to
every surviving entry, fabricated ones included.  All randomness is keyed
per (seed, source, cycle, grid), so outcomes are reproducible and do not
depend on list order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from . import streams
from .solvers import Observation

FALLBACK_TRUTH = 75.0  # mid-range reading used when no truth was ever published


@dataclass(frozen=True)
class PerturbationParams:
    """Drop/imitate probabilities and the two Laplace scales."""

    p1: float = 0.2
    p2: float = 0.05
    lambda1: float = 1.5
    lambda2: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.p1 <= 1.0:
            raise ValueError(f"p1 must be in [0, 1], got {self.p1}")
        if not 0.0 <= self.p2 <= 1.0:
            raise ValueError(f"p2 must be in [0, 1], got {self.p2}")
        if self.lambda1 <= 0:
            raise ValueError(f"lambda1 must be > 0, got {self.lambda1}")
        if self.lambda2 <= 0:
            raise ValueError(f"lambda2 must be > 0, got {self.lambda2}")


@dataclass(frozen=True)
class PerturbedObs:
    """One perturbed entry; the imitated flag never leaves the process."""

    grid_id: str
    value: float
    imitated: bool = False


@dataclass(frozen=True)
class PerturbedReport:
    pseudo_id: str
    cycle: int
    entries: tuple[PerturbedObs, ...]


@dataclass
class PerturbStats:
    """Bookkeeping for tests and run manifests."""

    kept: int = 0
    dropped: int = 0
    imitated: int = 0
    uncovered: int = 0
    fallback_mean: int = 0
    fallback_constant: int = 0

    def merge(self, other: "PerturbStats") -> None:
        self.kept += other.kept
        self.dropped += other.dropped
        self.imitated += other.imitated
        self.uncovered += other.uncovered
        self.fallback_mean += other.fallback_mean
        self.fallback_constant += other.fallback_constant


def laplace_from_uniform(u: float, scale: float) -> float:
    """Inverse-CDF Laplace sample from one uniform draw in (0, 1)."""
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    half = u - 0.5
    return -scale * math.copysign(1.0, half) * math.log1p(-2.0 * abs(half))


def laplace_sample(scale: float, *key) -> float:
    """Keyed Laplace draw, centered at zero."""
    return laplace_from_uniform(streams.unit_uniform(*key), scale)


def grid_perturb(
    real_id,
    observations: Sequence[Observation],
    grid_ids: Iterable[str],
    prev_truths: Mapping[str, float],
    params: PerturbationParams,
    seed: int,
    cycle: int,
) -> tuple[list[PerturbedObs], PerturbStats]:
    """Drop real entries and fabricate entries for uncovered grids.

    A fabricated value starts from the grid's previously published truth
    (or the mean of all published truths, or a fixed mid-range constant
    when nothing was ever published) and adds Laplace noise at the first
    scale.
    """
    stats = PerturbStats()
    kept: list[PerturbedObs] = []
    for obs in observations:
        if streams.unit_uniform(seed, "drop", repr(real_id), cycle, obs.grid_id) < params.p1:
            stats.dropped += 1
        else:
            kept.append(PerturbedObs(obs.grid_id, obs.value, imitated=False))
            stats.kept += 1
    covered = {e.grid_id for e in kept}
    global_mean = (
        math.fsum(prev_truths.values()) / len(prev_truths) if prev_truths else None
    )
    for g in sorted(set(grid_ids) - covered):
        stats.uncovered += 1
        if streams.unit_uniform(seed, "imitate", repr(real_id), cycle, g) >= params.p2:
            continue
        base = prev_truths.get(g)
        if base is None:
            if global_mean is not None:
                base = global_mean
                stats.fallback_mean += 1
            else:
                base = FALLBACK_TRUTH
                stats.fallback_constant += 1
        noise = laplace_sample(params.lambda1, seed, "imitate-noise", repr(real_id), cycle, g)
        kept.append(PerturbedObs(g, base + noise, imitated=True))
        stats.imitated += 1
    return kept, stats


def value_perturb(
    real_id,
    entries: Sequence[PerturbedObs],
    lambda2: float,
    seed: int,
    cycle: int,
) -> list[PerturbedObs]:
    """Add independent Laplace noise to every entry's value."""
    out = []
    for e in entries:
        noise = laplace_sample(lambda2, seed, "value-noise", repr(real_id), cycle, e.grid_id)
        out.append(PerturbedObs(e.grid_id, e.value + noise, e.imitated))
    return out


def build_perturbed_report(
    real_id,
    pseudo_id: str,
    observations: Sequence[Observation],
    grid_ids: Iterable[str],
    prev_truths: Mapping[str, float],
    params: PerturbationParams,
    seed: int,
    cycle: int,
) -> tuple[PerturbedReport, PerturbStats]:
    """Full two-layer perturbation of one vehicle's cycle report."""
    entries, stats = grid_perturb(
        real_id, observations, grid_ids, prev_truths, params, seed, cycle
    )
    entries = value_perturb(real_id, entries, params.lambda2, seed, cycle)
    return PerturbedReport(str(pseudo_id), cycle, tuple(entries)), stats


def report_to_lines(report: PerturbedReport) -> list[str]:
    """Serialize as JSON lines, one entry per line (no imitation flag)."""
    return [
        json.dumps(
            {
                "pseudo_id": report.pseudo_id,
                "cycle": report.cycle,
                "grid_id": e.grid_id,
                "value": e.value,
            },
            sort_keys=True,
        )
        for e in report.entries
    ]


def reports_from_lines(lines: Iterable[str]) -> list[PerturbedReport]:
    grouped: dict[tuple[str, int], list[PerturbedObs]] = {}
    order: list[tuple[str, int]] = []
    for n, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            key = (rec["pseudo_id"], int(rec["cycle"]))
            entry = PerturbedObs(rec["grid_id"], float(rec["value"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"bad perturbed record on line {n}: {exc}") from exc
        if key not in grouped:
            grouped[key] = []
            order.append(key)
        grouped[key].append(entry)
    return [
        PerturbedReport(pid, cycle, tuple(grouped[(pid, cycle)])) for pid, cycle in order
    ]
