"""Plaintext per-cycle solvers for joint truth and reliability estimation.

Each sensing cycle is solved by block-coordinate descent: source weights
are updated from the current truth estimates, then truths from the
weights, until the truths stop moving.  Both closed-form updates come from
the stationarity conditions of a weighted squared-error objective subject
to a constraint that pins the scale of the weights (the exponentials of
the negated combined weights sum to one).

Two solvers share this loop:

* The full solver (`run_st`) reuses every report for all spatially
  correlated grids and blends both weights and truths with their
  histories through affine combiners.
* The simplified solver (`run_sst`) charges each report only to its own
  grid and blends only the weights; truths are plain weighted means.

The plain baseline (`run_baseline_td`) is the simplified solver with all
histories empty, i.e. classic conflict-resolution iteration from scratch.

Accumulations use `math.fsum`, so results are independent of source/grid
labelling and iteration order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .geo import ThetaTable
from .temporal import (
    AffinePair,
    TemporalParams,
    TruthHistory,
    WeightHistory,
    delta_for_truth,
    delta_for_weight,
)

ESTIMATED = "estimated"
CARRIED_FORWARD = "carried-forward"
UNESTIMATED = "unestimated"


@dataclass(frozen=True)
class Observation:
    """One sensory reading: a source's value for one grid in one cycle."""

    source: object
    grid_id: str
    value: float
    cycle: int


@dataclass(frozen=True)
class SolverParams:
    """Iteration controls and numeric safety rails.

    `tolerance` bounds the max relative truth change between iterations;
    `distance_floor` keeps per-source distances away from zero so the log
    stays finite; weights are clamped to [0, weight_cap] after each update
    (clamps are counted and should not fire on benign data).
    `initial_weight` of None means 1/n.  `combiner_floor` keeps combined
    weights positive inside truth updates so an all-zero-weight iteration
    degrades to an unweighted mean instead of 0/0.
    """

    tolerance: float = 1e-6
    max_iterations: int = 100
    distance_floor: float = 1e-12
    weight_cap: float = 50.0
    initial_weight: float | None = None
    combiner_floor: float = 1e-12

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.distance_floor <= 0:
            raise ValueError(f"distance_floor must be > 0, got {self.distance_floor}")
        if self.weight_cap <= 0:
            raise ValueError(f"weight_cap must be > 0, got {self.weight_cap}")


@dataclass
class SolverTrace:
    """Optional per-iteration diagnostics.

    `objectives` holds the objective value after every half-step (weight
    update, then truth update), starting with the first weight update;
    from that point on the sequence must be non-increasing.
    `constraint_residuals` holds |sum_s exp(-combined weight) - 1| after
    each weight update, computed before clamping.
    """

    objectives: list[float] = field(default_factory=list)
    constraint_residuals: list[float] = field(default_factory=list)
    clamp_events: int = 0
    floor_events: int = 0


@dataclass
class CycleResult:
    """Outcome of one cycle: truths, weights, and per-grid status.

    `truths` holds estimated and carried-forward grids only; `status` has
    one entry per world grid.  `provenance` is set by the dual-solver
    pipeline to record which algorithm produced each grid's truth.
    """

    cycle: int
    truths: dict[str, float]
    weights: dict
    iterations: int
    status: dict[str, str]
    clamp_events: int = 0
    floor_events: int = 0
    provenance: dict[str, str] | None = None


def group_by_source(observations: Iterable[Observation]) -> dict:
    """Group observations per source, rejecting duplicate (source, grid)."""
    by_source: dict = {}
    seen = set()
    for obs in observations:
        key = (obs.source, obs.grid_id)
        if key in seen:
            raise ValueError(f"duplicate observation for source {obs.source!r} grid {obs.grid_id!r}")
        seen.add(key)
        by_source.setdefault(obs.source, []).append(obs)
    return {s: by_source[s] for s in sorted(by_source, key=repr)}


def truth_deltas_for(
    grid_ids: Iterable[str],
    truth_histories: Mapping[str, TruthHistory],
    params: TemporalParams,
    t: int,
) -> dict[str, AffinePair]:
    return {g: delta_for_truth(truth_histories.get(g), params, t) for g in grid_ids}


def weight_deltas_for(
    sources: Iterable,
    weight_histories: Mapping,
    params: TemporalParams,
    t: int,
) -> dict:
    return {s: delta_for_weight(weight_histories.get(s), params, t) for s in sources}


def _combined_weights(
    temp_weights: Mapping, weight_deltas: Mapping, floor: float
) -> dict:
    return {
        s: max(weight_deltas[s].apply(w), floor) for s, w in temp_weights.items()
    }


# ---------------------------------------------------------------------------
# Full solver: spatial reuse + weight/truth histories
# ---------------------------------------------------------------------------


def spatial_terms(
    observations: Iterable[Observation], thetas: ThetaTable
) -> dict[str, list[tuple[object, float, float]]]:
    """Per-grid list of (source, theta, value) with nonzero coefficients.

    A grid appears iff at least one report reaches it; those are exactly
    the grids the full solver can estimate this cycle.
    """
    terms: dict[str, list[tuple[object, float, float]]] = {}
    for obs in observations:
        for target, theta in thetas.row(obs.grid_id).items():
            terms.setdefault(target, []).append((obs.source, theta, obs.value))
    return terms


def st_update_truths(
    terms: Mapping[str, Sequence[tuple[object, float, float]]],
    temp_weights: Mapping,
    weight_deltas: Mapping,
    truth_deltas: Mapping[str, AffinePair],
    params: SolverParams,
) -> dict[str, float]:
    """Closed-form temporary-truth update given current temporary weights."""
    combined = _combined_weights(temp_weights, weight_deltas, params.combiner_floor)
    truths: dict[str, float] = {}
    for g, rows in terms.items():
        d = truth_deltas[g]
        num = math.fsum(combined[s] * theta * (v - d.offset) for s, theta, v in rows)
        den = d.scale * math.fsum(combined[s] * theta for s, theta, v in rows)
        truths[g] = num / den
    return truths


def st_update_weights(
    by_source: Mapping,
    thetas: ThetaTable,
    temp_truths: Mapping[str, float],
    truth_deltas: Mapping[str, AffinePair],
    weight_deltas: Mapping,
    params: SolverParams,
    trace: SolverTrace | None = None,
) -> dict:
    """Closed-form temporary-weight update given current temporary truths.

    Each source's distance is the theta-weighted squared deviation of its
    reports from the combined truths; the weight is the log of total
    distance over own distance, mapped back through the affine combiner.
    """
    distances: dict = {}
    floor_events = 0
    for s, obs_list in by_source.items():
        d = math.fsum(
            theta * (obs.value - truth_deltas[g].apply(temp_truths[g])) ** 2
            for obs in obs_list
            for g, theta in thetas.row(obs.grid_id).items()
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


def _finish_weight_update(raw, weight_deltas, params, trace, floor_events):
    clamp_events = 0
    weights = {}
    for s, w in raw.items():
        clamped = min(max(w, 0.0), params.weight_cap)
        if clamped != w:
            clamp_events += 1
        weights[s] = clamped
    if trace is not None:
        residual = abs(
            math.fsum(math.exp(-weight_deltas[s].apply(w)) for s, w in raw.items()) - 1.0
        )
        trace.constraint_residuals.append(residual)
        trace.clamp_events += clamp_events
        trace.floor_events += floor_events
    return weights, clamp_events, floor_events


def st_objective(
    by_source: Mapping,
    thetas: ThetaTable,
    temp_weights: Mapping,
    temp_truths: Mapping[str, float],
    weight_deltas: Mapping,
    truth_deltas: Mapping[str, AffinePair],
) -> float:
    """Weighted squared-error objective of the full solver (>= 0)."""
    return math.fsum(
        weight_deltas[s].apply(temp_weights[s])
        * theta
        * (obs.value - truth_deltas[g].apply(temp_truths[g])) ** 2
        for s, obs_list in by_source.items()
        for obs in obs_list
        for g, theta in thetas.row(obs.grid_id).items()
        if g in temp_truths
    )


def _initial_st_truths(terms, by_source) -> dict[str, float]:
    """Per-grid mean of direct reports; theta-weighted mean otherwise."""
    direct: dict[str, list[float]] = {}
    for obs_list in by_source.values():
        for obs in obs_list:
            direct.setdefault(obs.grid_id, []).append(obs.value)
    init = {}
    for g, rows in terms.items():
        if g in direct:
            init[g] = math.fsum(direct[g]) / len(direct[g])
        else:
            init[g] = math.fsum(th * v for _, th, v in rows) / math.fsum(
                th for _, th, v in rows
            )
    return init


def _converged(old: Mapping[str, float], new: Mapping[str, float], tol: float) -> bool:
    worst = 0.0
    for g, v in new.items():
        change = abs(v - old[g]) / max(abs(v), 1.0)
        if change > worst:
            worst = change
    return worst < tol


def _finalize(
    cycle: int,
    grid_ids: Iterable[str],
    temp_truths: Mapping[str, float],
    truth_deltas: Mapping[str, AffinePair],
    temp_weights: Mapping,
    weight_deltas: Mapping,
    truth_histories: Mapping[str, TruthHistory],
    iterations: int,
    clamp_events: int,
    floor_events: int,
) -> CycleResult:
    truths: dict[str, float] = {}
    status: dict[str, str] = {}
    for g in grid_ids:
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
        cycle=cycle,
        truths=truths,
        weights=weights,
        iterations=iterations,
        status=status,
        clamp_events=clamp_events,
        floor_events=floor_events,
    )


def run_st(
    observations: Sequence[Observation],
    thetas: ThetaTable,
    weight_histories: Mapping,
    truth_histories: Mapping[str, TruthHistory],
    temporal_params: TemporalParams,
    solver_params: SolverParams,
    t: int,
    trace: SolverTrace | None = None,
) -> CycleResult:
    """Solve one cycle with spatial reuse and both temporal combiners.

    Appending the returned truths/weights to the histories is the
    caller's responsibility.
    """
    by_source = group_by_source(observations)
    terms = spatial_terms(observations, thetas)
    grid_ids = thetas.grid_ids
    truth_deltas = truth_deltas_for(terms, truth_histories, temporal_params, t)
    weight_deltas = weight_deltas_for(by_source, weight_histories, temporal_params, t)

    temp_truths = _initial_st_truths(terms, by_source)
    w0 = solver_params.initial_weight
    temp_weights = {s: (1.0 / len(by_source) if w0 is None else w0) for s in by_source}

    iterations = clamp_events = floor_events = 0
    for _ in range(solver_params.max_iterations):
        if not by_source:
            break
        temp_weights, clamps, floors = st_update_weights(
            by_source, thetas, temp_truths, truth_deltas, weight_deltas,
            solver_params, trace,
        )
        clamp_events += clamps
        floor_events += floors
        if trace is not None:
            trace.objectives.append(
                st_objective(by_source, thetas, temp_weights, temp_truths,
                             weight_deltas, truth_deltas)
            )
        new_truths = st_update_truths(
            terms, temp_weights, weight_deltas, truth_deltas, solver_params
        )
        if trace is not None:
            trace.objectives.append(
                st_objective(by_source, thetas, temp_weights, new_truths,
                             weight_deltas, truth_deltas)
            )
        done = _converged(temp_truths, new_truths, solver_params.tolerance)
        temp_truths = new_truths
        iterations += 1
        if done:
            break

    return _finalize(
        t, grid_ids, temp_truths, truth_deltas, temp_weights, weight_deltas,
        truth_histories, iterations, clamp_events, floor_events,
    )


# ---------------------------------------------------------------------------
# Simplified solver: own-grid reports, weight history only
# ---------------------------------------------------------------------------


def sst_update_truths(
    by_source: Mapping,
    temp_weights: Mapping,
    weight_deltas: Mapping,
    params: SolverParams,
) -> dict[str, float]:
    """Weighted mean of each grid's own reports (no reuse, no truth blend)."""
    combined = _combined_weights(temp_weights, weight_deltas, params.combiner_floor)
    num: dict[str, list[float]] = {}
    den: dict[str, list[float]] = {}
    for s, obs_list in by_source.items():
        for obs in obs_list:
            num.setdefault(obs.grid_id, []).append(combined[s] * obs.value)
            den.setdefault(obs.grid_id, []).append(combined[s])
    return {g: math.fsum(num[g]) / math.fsum(den[g]) for g in num}


def sst_update_weights(
    by_source: Mapping,
    truths: Mapping[str, float],
    weight_deltas: Mapping,
    params: SolverParams,
    trace: SolverTrace | None = None,
) -> dict:
    """Log-ratio weight update over own-grid squared deviations."""
    distances: dict = {}
    floor_events = 0
    for s, obs_list in by_source.items():
        d = math.fsum((obs.value - truths[obs.grid_id]) ** 2 for obs in obs_list)
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


def sst_objective(
    by_source: Mapping,
    temp_weights: Mapping,
    truths: Mapping[str, float],
    weight_deltas: Mapping,
) -> float:
    """Weighted squared-error objective of the simplified solver."""
    return math.fsum(
        weight_deltas[s].apply(temp_weights[s]) * (obs.value - truths[obs.grid_id]) ** 2
        for s, obs_list in by_source.items()
        for obs in obs_list
    )


def run_sst(
    observations: Sequence[Observation],
    weight_histories: Mapping,
    temporal_params: TemporalParams,
    solver_params: SolverParams,
    t: int,
    grid_ids: Iterable[str] | None = None,
    trace: SolverTrace | None = None,
) -> CycleResult:
    """Solve one cycle with own-grid reports and weight history only.

    Grids with no reports are left unestimated (there is no truth history
    in this solver, so nothing is carried forward).
    """
    by_source = group_by_source(observations)
    direct: dict[str, list[float]] = {}
    for obs_list in by_source.values():
        for obs in obs_list:
            direct.setdefault(obs.grid_id, []).append(obs.value)
    weight_deltas = weight_deltas_for(by_source, weight_histories, temporal_params, t)

    truths = {g: math.fsum(vals) / len(vals) for g, vals in direct.items()}
    w0 = solver_params.initial_weight
    temp_weights = {s: (1.0 / len(by_source) if w0 is None else w0) for s in by_source}

    iterations = clamp_events = floor_events = 0
    for _ in range(solver_params.max_iterations):
        if not by_source:
            break
        temp_weights, clamps, floors = sst_update_weights(
            by_source, truths, weight_deltas, solver_params, trace
        )
        clamp_events += clamps
        floor_events += floors
        if trace is not None:
            trace.objectives.append(
                sst_objective(by_source, temp_weights, truths, weight_deltas)
            )
        new_truths = sst_update_truths(by_source, temp_weights, weight_deltas, solver_params)
        if trace is not None:
            trace.objectives.append(
                sst_objective(by_source, temp_weights, new_truths, weight_deltas)
            )
        done = _converged(truths, new_truths, solver_params.tolerance)
        truths = new_truths
        iterations += 1
        if done:
            break

    all_grids = set(truths)
    if grid_ids is not None:
        all_grids.update(grid_ids)
    status = {g: (ESTIMATED if g in truths else UNESTIMATED) for g in all_grids}
    weights = {s: weight_deltas[s].apply(w) for s, w in temp_weights.items()}
    return CycleResult(
        cycle=t,
        truths=dict(truths),
        weights=weights,
        iterations=iterations,
        status=status,
        clamp_events=clamp_events,
        floor_events=floor_events,
    )


def run_baseline_td(
    observations: Sequence[Observation],
    solver_params: SolverParams,
    t: int,
    grid_ids: Iterable[str] | None = None,
    trace: SolverTrace | None = None,
) -> CycleResult:
    """Plain conflict-resolution baseline: simplified solver, no history."""
    return run_sst(
        observations,
        weight_histories={},
        temporal_params=TemporalParams(),
        solver_params=solver_params,
        t=t,
        grid_ids=grid_ids,
        trace=trace,
    )
