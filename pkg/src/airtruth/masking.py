"""Additive one-time-pad masking over a fixed-point ring, and the solver
that runs directly on the recovered aggregates.

Vehicles never upload raw values.  For every grid a report can speak to,
the vehicle uploads three masked sequences per report entry: the
correlation-weighted value, its square, and the bare coefficient.  Masks
are pairwise pads over the entries of one sequence, so they cancel exactly
under summation and the server learns only the three per-(vehicle, grid)
sums -- enough to run the full spatial/temporal update loop, nothing more.

Values live in a 64-bit modular ring at a fixed scale of 1e6 per unit;
integer arithmetic makes the cancellation exact where float masking would
leave residue that corrupts the squared terms.  Mask material is derived
from a keyed generator owned by the reporting vehicle and keyed down to
(cycle, kind, grid, pair), so no pad is ever reused.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from . import streams
from .solvers import (
    CARRIED_FORWARD,
    ESTIMATED,
    UNESTIMATED,
    CycleResult,
    Observation,
    SolverParams,
    SolverTrace,
    _combined_weights,
    _converged,
    _finish_weight_update,
    truth_deltas_for,
    weight_deltas_for,
)
from .geo import ThetaTable
from .temporal import AffinePair, TemporalParams, TruthHistory

SCALE = 10**6
RING = 1 << 64
_SIGN_BOUND = 1 << 63
_ENCODE_LIMIT = 1 << 62  # headroom for aggregation before wrap-around


class ProtocolError(ValueError):
    """A malformed or inconsistent report."""


def fx_encode(value: float) -> int:
    """Encode a real value as a raw ring element (1e-6 resolution)."""
    units = round(value * SCALE)
    if not -_ENCODE_LIMIT < units < _ENCODE_LIMIT:
        raise ValueError(f"value {value} outside fixed-point range")
    return units % RING


def fx_decode(raw: int) -> float:
    """Decode a raw ring element back to a real value."""
    units = raw if raw < _SIGN_BOUND else raw - RING
    return units / SCALE


@dataclass
class OpCounter:
    """Counts ring additions performed while masking (cost accounting)."""

    additions: int = 0


class MaskSource:
    """Pad generator owned by one vehicle.

    Pads are derived from (master seed, context, real id, cycle, kind,
    grid, low index, high index); only the owner can regenerate them.
    """

    def __init__(self, master_seed: int, context: str, real_id):
        self._seed = master_seed
        self._context = context
        self._rid = real_id

    def pad(self, cycle: int, kind: int, grid_id: str, j: int, jp: int) -> int:
        if not j < jp:
            raise ValueError(f"pad indices must satisfy j < jp, got {j}, {jp}")
        return streams.digest64(
            self._seed, "mask", self._context, repr(self._rid), cycle, kind, grid_id, j, jp
        )


def mask_sequence(
    values: Sequence[int],
    pad: Callable[[int, int], int],
    counter: OpCounter | None = None,
) -> list[int]:
    """Mask a sequence of ring elements with pairwise pads.

    Element j gains every pad (j, j') with j < j' and loses every pad
    (j', j) with j' < j, so the modular sum of the output equals the
    modular sum of the input exactly.
    """
    c = len(values)
    out = list(values)
    for j in range(c):
        for jp in range(j + 1, c):
            alpha = pad(j, jp)
            out[j] = (out[j] + alpha) % RING
            out[jp] = (out[jp] - alpha) % RING
            if counter is not None:
                counter.additions += 2
    return out


@dataclass(frozen=True)
class BetaRows:
    """The three masked sequences a report carries for one grid."""

    beta1: tuple[int, ...]  # masked theta * value
    beta2: tuple[int, ...]  # masked theta * value^2
    beta3: tuple[int, ...]  # masked theta


@dataclass(frozen=True)
class MaskedReport:
    """One vehicle's masked upload for one cycle, keyed by pseudo-id."""

    pseudo_id: str
    cycle: int
    rows: Mapping[str, BetaRows]


@dataclass(frozen=True)
class ChiRow:
    """Recovered per-(source, grid) aggregates."""

    chi1: float  # sum of theta * value
    chi2: float  # sum of theta * value^2
    chi3: float  # sum of theta


def build_masked_report(
    real_id,
    pseudo_id: str,
    observations: Sequence[Observation],
    thetas: ThetaTable,
    masks: MaskSource,
    cycle: int,
    counter: OpCounter | None = None,
) -> MaskedReport:
    """Mask one vehicle's cycle report.

    The report holds one row per grid reachable from any of the vehicle's
    observations; each row's sequences cover all c observations, with
    zeros where a particular observation does not reach the grid.
    Coefficients are quantized to the ring resolution before use so the
    three sums stay mutually consistent.
    """
    obs = sorted(observations, key=lambda o: o.grid_id)
    if len({o.grid_id for o in obs}) != len(obs):
        raise ProtocolError(f"source {real_id!r}: duplicate grid in report")
    quantized: list[dict[str, float]] = []
    for o in obs:
        row = {}
        for target, theta in thetas.row(o.grid_id).items():
            tq = round(theta * SCALE) / SCALE
            if tq > 0.0:
                row[target] = tq
        quantized.append(row)
    targets = sorted({g for row in quantized for g in row})
    rows: dict[str, BetaRows] = {}
    for g in targets:
        thetas_g = [row.get(g, 0.0) for row in quantized]
        seqs = []
        for kind, values in enumerate(
            (
                [t * o.value for t, o in zip(thetas_g, obs)],
                [t * o.value * o.value for t, o in zip(thetas_g, obs)],
                thetas_g,
            ),
            start=1,
        ):
            encoded = [fx_encode(v) for v in values]
            masked = mask_sequence(
                encoded,
                lambda j, jp, _kind=kind, _g=g: masks.pad(cycle, _kind, _g, j, jp),
                counter,
            )
            seqs.append(tuple(masked))
        rows[g] = BetaRows(*seqs)
    return MaskedReport(pseudo_id=str(pseudo_id), cycle=cycle, rows=rows)


def aggregate_chi(report: MaskedReport) -> dict[str, ChiRow]:
    """Recover the per-grid sums from one masked report."""
    chis: dict[str, ChiRow] = {}
    for g, rows in report.rows.items():
        lengths = {len(rows.beta1), len(rows.beta2), len(rows.beta3)}
        if len(lengths) != 1:
            raise ProtocolError(
                f"report {report.pseudo_id!r}: mismatched sequence lengths for grid {g!r}"
            )
        if not lengths.pop():
            raise ProtocolError(f"report {report.pseudo_id!r}: empty row for grid {g!r}")
        chis[g] = ChiRow(
            chi1=fx_decode(sum(rows.beta1) % RING),
            chi2=fx_decode(sum(rows.beta2) % RING),
            chi3=fx_decode(sum(rows.beta3) % RING),
        )
    return chis


# ---------------------------------------------------------------------------
# Masked-domain solver
# ---------------------------------------------------------------------------


def masked_update_truths(
    chis: Mapping[str, Mapping[str, ChiRow]],
    temp_weights: Mapping,
    weight_deltas: Mapping,
    truth_deltas: Mapping[str, AffinePair],
    params: SolverParams,
) -> dict[str, float]:
    """Temporary-truth update computed from aggregates alone."""
    combined = _combined_weights(temp_weights, weight_deltas, params.combiner_floor)
    num: dict[str, list[float]] = {}
    den: dict[str, list[float]] = {}
    for s, rows in chis.items():
        fa = combined[s]
        for g, chi in rows.items():
            d = truth_deltas[g]
            num.setdefault(g, []).append(fa * (chi.chi1 - d.offset * chi.chi3))
            den.setdefault(g, []).append(fa * chi.chi3)
    return {
        g: math.fsum(num[g]) / (truth_deltas[g].scale * math.fsum(den[g])) for g in num
    }


def masked_update_weights(
    chis: Mapping[str, Mapping[str, ChiRow]],
    temp_truths: Mapping[str, float],
    truth_deltas: Mapping[str, AffinePair],
    weight_deltas: Mapping,
    params: SolverParams,
    trace: SolverTrace | None = None,
) -> dict:
    """Temporary-weight update computed from aggregates alone.

    The per-source distance expands the squared deviation through the
    three sums; quantization can push a near-zero distance slightly
    negative, which is floored (and counted) like an exact zero.
    """
    distances: dict = {}
    floor_events = 0
    for s, rows in chis.items():
        d = math.fsum(
            chi.chi2
            - 2.0 * truth_deltas[g].apply(temp_truths[g]) * chi.chi1
            + truth_deltas[g].apply(temp_truths[g]) ** 2 * chi.chi3
            for g, chi in rows.items()
            if g in temp_truths
        )
        if d < params.distance_floor:
            d = params.distance_floor
            floor_events += 1
        distances[s] = d
    total = math.fsum(distances.values())
    raw = {
        s: (math.log(total / d) - weight_deltas[s].offset) / weight_deltas[s].scale
        for s, d in distances.items()
    }
    return _finish_weight_update(raw, weight_deltas, params, trace, floor_events)


def masked_objective(
    chis: Mapping[str, Mapping[str, ChiRow]],
    temp_weights: Mapping,
    temp_truths: Mapping[str, float],
    weight_deltas: Mapping,
    truth_deltas: Mapping[str, AffinePair],
) -> float:
    return math.fsum(
        weight_deltas[s].apply(temp_weights[s])
        * (
            chi.chi2
            - 2.0 * truth_deltas[g].apply(temp_truths[g]) * chi.chi1
            + truth_deltas[g].apply(temp_truths[g]) ** 2 * chi.chi3
        )
        for s, rows in chis.items()
        for g, chi in rows.items()
        if g in temp_truths
    )


def run_airq(
    reports: Sequence[MaskedReport],
    weight_histories: Mapping,
    truth_histories: Mapping[str, TruthHistory],
    temporal_params: TemporalParams,
    solver_params: SolverParams,
    t: int,
    seed: int = 0,
    grid_ids: Iterable[str] | None = None,
    trace: SolverTrace | None = None,
) -> CycleResult:
    """Run the full update loop on masked reports.

    Mirrors the plaintext full solver but initializes each grid's truth
    from its history (the per-grid report mean is not recoverable from
    masked data), falling back to a seeded uniform draw on [0, 500].
    """
    chis: dict[str, dict[str, ChiRow]] = {}
    for report in reports:
        if report.cycle != t:
            raise ProtocolError(
                f"report {report.pseudo_id!r} is for cycle {report.cycle}, expected {t}"
            )
        if report.pseudo_id in chis:
            raise ProtocolError(f"duplicate report for {report.pseudo_id!r}")
        rows = aggregate_chi(report)
        if rows:
            chis[report.pseudo_id] = rows
    chis = {s: chis[s] for s in sorted(chis)}

    estimable = sorted({g for rows in chis.values() for g in rows})
    world = set(estimable)
    if grid_ids is not None:
        world.update(grid_ids)
    world.update(truth_histories)

    truth_deltas = truth_deltas_for(estimable, truth_histories, temporal_params, t)
    weight_deltas = weight_deltas_for(chis, weight_histories, temporal_params, t)

    temp_truths: dict[str, float] = {}
    for g in estimable:
        hist = truth_histories.get(g)
        last = hist.last() if hist is not None else None
        if last is not None:
            temp_truths[g] = last[1]
        else:
            temp_truths[g] = streams.unit_uniform(seed, "st-init", g, t) * 500.0

    w0 = solver_params.initial_weight
    temp_weights = {s: (1.0 / len(chis) if w0 is None else w0) for s in chis}

    iterations = clamp_events = floor_events = 0
    for _ in range(solver_params.max_iterations):
        if not chis:
            break
        temp_weights, clamps, floors = masked_update_weights(
            chis, temp_truths, truth_deltas, weight_deltas, solver_params, trace
        )
        clamp_events += clamps
        floor_events += floors
        if trace is not None:
            trace.objectives.append(
                masked_objective(chis, temp_weights, temp_truths, weight_deltas, truth_deltas)
            )
        new_truths = masked_update_truths(
            chis, temp_weights, weight_deltas, truth_deltas, solver_params
        )
        if trace is not None:
            trace.objectives.append(
                masked_objective(chis, temp_weights, new_truths, weight_deltas, truth_deltas)
            )
        done = _converged(temp_truths, new_truths, solver_params.tolerance)
        temp_truths = new_truths
        iterations += 1
        if done:
            break

    truths: dict[str, float] = {}
    status: dict[str, str] = {}
    for g in sorted(world):
        if g in temp_truths:
            truths[g] = truth_deltas[g].apply(temp_truths[g])
            status[g] = ESTIMATED
        else:
            hist = truth_histories.get(g)
            last = hist.last() if hist is not None else None
            if last is not None:
                truths[g] = last[1]
                status[g] = CARRIED_FORWARD
            else:
                status[g] = UNESTIMATED
    weights = {s: weight_deltas[s].apply(w) for s, w in temp_weights.items()}
    return CycleResult(
        cycle=t,
        truths=truths,
        weights=weights,
        iterations=iterations,
        status=status,
        clamp_events=clamp_events,
        floor_events=floor_events,
    )


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------


def report_to_lines(report: MaskedReport) -> list[str]:
    """Serialize a report as JSON lines, one grid row per line.

    Raw ring elements are rendered as unsigned decimal strings so the
    encoding is bit-exact everywhere.
    """
    lines = []
    for g in sorted(report.rows):
        rows = report.rows[g]
        lines.append(
            json.dumps(
                {
                    "pseudo_id": report.pseudo_id,
                    "cycle": report.cycle,
                    "grid_id": g,
                    "beta1": [str(x) for x in rows.beta1],
                    "beta2": [str(x) for x in rows.beta2],
                    "beta3": [str(x) for x in rows.beta3],
                },
                sort_keys=True,
            )
        )
    return lines


def reports_from_lines(lines: Iterable[str]) -> list[MaskedReport]:
    """Parse JSON lines back into reports (grouped by pseudo-id, cycle)."""
    grouped: dict[tuple[str, int], dict[str, BetaRows]] = {}
    order: list[tuple[str, int]] = []
    for n, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            key = (rec["pseudo_id"], int(rec["cycle"]))
            rows = BetaRows(
                beta1=tuple(int(x) for x in rec["beta1"]),
                beta2=tuple(int(x) for x in rec["beta2"]),
                beta3=tuple(int(x) for x in rec["beta3"]),
            )
            grid_id = rec["grid_id"]
        except (KeyError, ValueError, TypeError) as exc:
            raise ProtocolError(f"bad report record on line {n}: {exc}") from exc
        if key not in grouped:
            grouped[key] = {}
            order.append(key)
        if grid_id in grouped[key]:
            raise ProtocolError(f"line {n}: duplicate grid {grid_id!r} for {key}")
        grouped[key][grid_id] = rows
    return [
        MaskedReport(pseudo_id=pid, cycle=cycle, rows=grouped[(pid, cycle)])
        for pid, cycle in order
    ]
