"""Evaluation tables: per-cycle and daily error, valid-estimation counts,
and daily error differences against the masked baseline.

A day is 96 sensing cycles.  Grids an algorithm could not estimate in a
cycle are excluded from that cycle's error and show up only in the
coverage column.  All tables are derivable from the dumped per-cycle
estimates, so they can be recomputed offline from `truths.csv` alone
(plus the run manifest for the algorithm list and cycle count).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

CYCLES_PER_DAY = 96
VALID_THRESHOLDS = (0.15, 0.20, 0.25)
DIFF_BASE = "airq"


def rmse(estimates: Mapping[str, float], truths: Mapping[str, float]) -> float:
    """Root-mean-square error over the keys present in `estimates`."""
    if not estimates:
        raise ValueError("no estimates to evaluate")
    sq = [(estimates[g] - truths[g]) ** 2 for g in estimates]
    return math.sqrt(math.fsum(sq) / len(sq))


def daily_rmse(
    cycle_values: Sequence[float | None],
) -> tuple[list[float | None], tuple[int, float] | None]:
    """Mean per full 96-cycle day, plus the trailing partial day if any.

    Days with no evaluable cycles yield None.  The partial tail is
    returned separately as (cycle count, mean).
    """
    full: list[float | None] = []
    n_full = len(cycle_values) // CYCLES_PER_DAY
    for d in range(n_full):
        chunk = [
            v
            for v in cycle_values[d * CYCLES_PER_DAY : (d + 1) * CYCLES_PER_DAY]
            if v is not None
        ]
        full.append(math.fsum(chunk) / len(chunk) if chunk else None)
    tail = [v for v in cycle_values[n_full * CYCLES_PER_DAY :] if v is not None]
    rest = len(cycle_values) - n_full * CYCLES_PER_DAY
    partial = (rest, math.fsum(tail) / len(tail)) if rest and tail else None
    return full, partial


def valid_estimations(
    estimates_by_cycle: Sequence[Mapping[str, float]],
    truths_by_cycle: Sequence[Mapping[str, float]],
    threshold: float,
) -> dict[str, int]:
    """Per grid, the number of cycles with relative error strictly below
    the threshold (only cycles where the grid was estimated count)."""
    counts: dict[str, int] = {}
    for estimates, truths in zip(estimates_by_cycle, truths_by_cycle):
        for g, est in estimates.items():
            truth = truths[g]
            counts.setdefault(g, 0)
            if abs(est - truth) / truth < threshold:
                counts[g] += 1
    return counts


def rmse_difference(
    base: Sequence[float | None], other: Sequence[float | None]
) -> list[float | None]:
    """Per-day base minus other; positive means `other` did better."""
    return [
        (b - o) if b is not None and o is not None else None
        for b, o in zip(base, other)
    ]


@dataclass
class MetricsTable:
    """All derived evaluation tables for one run."""

    algorithms: tuple[str, ...]
    cycles: int
    cycle_rmse: dict[str, list[float | None]]
    coverage: dict[str, list[int]]
    daily: dict[str, list[float | None]]
    partial: dict[str, tuple[int, float] | None]
    valid: dict[str, dict[float, dict[str, int]]]  # algo -> threshold -> grid -> count
    diffs: dict[str, list[float | None]]  # "airq-<other>" -> per-day values


class MetricsAccumulator:
    """Collects per-cycle estimates and real truths, then derives tables."""

    def __init__(self, algorithms: Sequence[str], cycles: int):
        self.algorithms = tuple(algorithms)
        self.cycles = cycles
        self.estimates: dict[str, list[dict[str, float]]] = {
            a: [dict() for _ in range(cycles)] for a in self.algorithms
        }
        self.real: list[dict[str, float]] = [dict() for _ in range(cycles)]

    def record(
        self,
        algo: str,
        cycle_index: int,
        estimates: Mapping[str, float],
        real: Mapping[str, float],
    ) -> None:
        self.estimates[algo][cycle_index] = dict(estimates)
        merged = self.real[cycle_index]
        for g, v in real.items():
            merged[g] = v

    def table(self) -> MetricsTable:
        cycle_rmse: dict[str, list[float | None]] = {}
        coverage: dict[str, list[int]] = {}
        daily: dict[str, list[float | None]] = {}
        partial: dict[str, tuple[int, float] | None] = {}
        valid: dict[str, dict[float, dict[str, int]]] = {}
        for a in self.algorithms:
            per_cycle: list[float | None] = []
            cover: list[int] = []
            for est, real in zip(self.estimates[a], self.real):
                cover.append(len(est))
                per_cycle.append(rmse(est, real) if est else None)
            cycle_rmse[a] = per_cycle
            coverage[a] = cover
            daily[a], partial[a] = daily_rmse(per_cycle)
            valid[a] = {
                thr: valid_estimations(self.estimates[a], self.real, thr)
                for thr in VALID_THRESHOLDS
            }
        diffs: dict[str, list[float | None]] = {}
        if DIFF_BASE in self.algorithms:
            for a in self.algorithms:
                if a != DIFF_BASE:
                    diffs[f"{DIFF_BASE}-{a}"] = rmse_difference(daily[DIFF_BASE], daily[a])
        return MetricsTable(
            algorithms=self.algorithms,
            cycles=self.cycles,
            cycle_rmse=cycle_rmse,
            coverage=coverage,
            daily=daily,
            partial=partial,
            valid=valid,
            diffs=diffs,
        )


# ---------------------------------------------------------------------------
# CSV output (and the reverse path used to recompute tables offline)
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_truths_csv(path, acc: MetricsAccumulator) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "grid", "algo", "estimate", "real"])
        for i in range(acc.cycles):
            for a in acc.algorithms:
                est = acc.estimates[a][i]
                for g in sorted(est):
                    w.writerow([i + 1, g, a, _fmt(est[g]), _fmt(acc.real[i][g])])


def read_truths_csv(path, algorithms: Sequence[str], cycles: int) -> MetricsAccumulator:
    acc = MetricsAccumulator(algorithms, cycles)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["cycle", "grid", "algo", "estimate", "real"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in reader:
            cycle, grid, algo, estimate, real = row
            i = int(cycle) - 1
            acc.estimates[algo][i][grid] = float(estimate)
            acc.real[i][grid] = float(real)
    return acc


def write_cycle_csv(path, table: MetricsTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algo", "cycle", "rmse", "estimated_grids"])
        for a in table.algorithms:
            for i, (value, cover) in enumerate(zip(table.cycle_rmse[a], table.coverage[a])):
                w.writerow([a, i + 1, "" if value is None else _fmt(value), cover])


def write_daily_csv(path, table: MetricsTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algo", "day", "rmse"])
        for a in table.algorithms:
            for d, value in enumerate(table.daily[a]):
                if value is not None:
                    w.writerow([a, d, _fmt(value)])


def write_partial_day_csv(path, table: MetricsTable) -> bool:
    """Write the trailing partial day, if any; returns whether it exists."""
    rows = [
        (a, len(table.daily[a]), table.partial[a][0], table.partial[a][1])
        for a in table.algorithms
        if table.partial[a] is not None
    ]
    if not rows:
        return False
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algo", "day", "cycles", "rmse"])
        for a, day, n, value in rows:
            w.writerow([a, day, n, _fmt(value)])
    return True


def write_valid_csv(path, table: MetricsTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algo", "grid", "threshold", "count"])
        for a in table.algorithms:
            for thr in VALID_THRESHOLDS:
                counts = table.valid[a][thr]
                for g in sorted(counts):
                    w.writerow([a, g, f"{thr:g}", counts[g]])


def write_diff_csv(path, table: MetricsTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "pair", "value"])
        for pair in sorted(table.diffs):
            for d, value in enumerate(table.diffs[pair]):
                if value is not None:
                    w.writerow([d, pair, _fmt(value)])


def write_tables(out_dir, acc: MetricsAccumulator) -> list[str]:
    """Write every table; returns the file names written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = acc.table()
    written = ["truths.csv", "rmse_cycle.csv", "rmse_daily.csv", "valid.csv", "diff.csv"]
    write_truths_csv(out / "truths.csv", acc)
    write_cycle_csv(out / "rmse_cycle.csv", table)
    write_daily_csv(out / "rmse_daily.csv", table)
    if write_partial_day_csv(out / "rmse_partial_day.csv", table):
        written.append("rmse_partial_day.csv")
    write_valid_csv(out / "valid.csv", table)
    write_diff_csv(out / "diff.csv", table)
    return written
