"""Simulation entities: pseudonym lifecycle, roadside relays, and the
dual-solver cycle handling that fuses masked and perturbed pipelines.

The trusted manager is the only party that can map a pseudo-id back to a
real id.  It hands out fresh per-cycle pseudonyms, answers weight-history
queries by pseudo-id without ever exposing real ids, and appends the
final fused weights back onto the real histories.  Roadside units are
pure relays.

Cycle handling runs two solvers side by side: the simplified solver on
the perturbed plaintext reports and the full solver on the masked
aggregates.  Grids with at least `tau` perturbed reports take their truth
from the simplified solver, the rest from the masked one; each source's
final weight is the mean of the two solver weights (or the single one it
has).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from . import streams
from .masking import MaskedReport, run_airq
from .perturb import PerturbedReport
from .solvers import (
    CARRIED_FORWARD,
    ESTIMATED,
    UNESTIMATED,
    CycleResult,
    Observation,
    SolverParams,
    SolverTrace,
    run_sst,
)
from .temporal import TemporalParams, TruthHistory, WeightHistory

logger = logging.getLogger(__name__)

PROVENANCE_SST = "sst"
PROVENANCE_ST = "st-masked"
PROVENANCE_CARRIED = CARRIED_FORWARD


@dataclass(frozen=True)
class SourceProfile:
    """Ground-truth profile of one vehicle (never visible to the server)."""

    real_id: int
    kappa: float
    bad: bool = False

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")


@dataclass(frozen=True)
class PseudoId:
    """Per-cycle unlinkable token standing in for a real id."""

    token: str
    cycle: int

    def __str__(self) -> str:
        return self.token


@dataclass(frozen=True)
class HandlingParams:
    """Report-count threshold selecting the dense-grid solver."""

    tau: int = 10

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")


class UnknownSourceError(ValueError):
    """Operation referenced a real id that was never registered."""


class TrustedManager:
    """Registry mapping real ids to weight histories and per-cycle tokens.

    Real ids never appear in any response; the per-cycle token map is
    wiped at the start of every cycle.  `weight_hook`, when set, may
    adjust a real id's history between cycles (application-level policy;
    disabled by default).
    """

    def __init__(self, master_seed: int):
        self._seed = master_seed
        self._histories: dict[int, WeightHistory] = {}
        self._pid_to_rid: dict[str, int] = {}
        self._cycle: int | None = None
        self.weight_hook = None

    def register(self, real_id: int) -> None:
        if real_id not in self._histories:
            self._histories[real_id] = WeightHistory(real_id)

    @property
    def registered_ids(self) -> list[int]:
        return sorted(self._histories)

    def begin_cycle(self, cycle: int) -> None:
        """Open a sensing cycle, discarding all previous pseudonyms."""
        self._pid_to_rid.clear()
        self._cycle = cycle
        if self.weight_hook is not None:
            for rid in sorted(self._histories):
                self.weight_hook(rid, self._histories[rid])

    def issue_pseudo_id(self, real_id: int, cycle: int) -> PseudoId:
        if real_id not in self._histories:
            raise UnknownSourceError(f"real id {real_id!r} is not registered")
        if cycle != self._cycle:
            raise ValueError(f"cycle {cycle} is not the open cycle {self._cycle}")
        token = streams.digest64(self._seed, "pid", real_id, cycle).to_bytes(8, "big").hex()
        if token in self._pid_to_rid:  # 64-bit collision; astronomically unlikely
            raise RuntimeError("pseudo-id collision")
        self._pid_to_rid[token] = real_id
        return PseudoId(token=token, cycle=cycle)

    def resolve_weight_histories(
        self, pids: Sequence[str]
    ) -> list[list[tuple[int, float]] | None]:
        """Histories in pid order; None marks a stale or unknown pid."""
        out: list[list[tuple[int, float]] | None] = []
        for pid in pids:
            rid = self._pid_to_rid.get(str(pid))
            if rid is None:
                out.append(None)
            else:
                out.append(list(self._histories[rid].entries))
        return out

    def histories_response(self, pids: Sequence[str]) -> str:
        """The JSON answer actually sent to the server (schema-stable)."""
        histories = [
            None if h is None else [[cycle, weight] for cycle, weight in h]
            for h in self.resolve_weight_histories(pids)
        ]
        return json.dumps({"histories": histories}, sort_keys=True)

    def append_final_weights(self, weights: Mapping[str, float], cycle: int) -> int:
        """Record this cycle's final weight for each pseudo-id's real id."""
        appended = 0
        for pid in sorted(weights, key=str):
            rid = self._pid_to_rid.get(str(pid))
            if rid is None:
                logger.warning("append for unknown pseudo-id %s skipped", pid)
                continue
            hist = self._histories[rid]
            last = hist.last()
            if last is not None and last[0] == cycle:
                raise ValueError(f"real id {rid} already has a weight for cycle {cycle}")
            hist.append(cycle, weights[pid])
            appended += 1
        return appended

    def history_of(self, real_id: int) -> WeightHistory:
        if real_id not in self._histories:
            raise UnknownSourceError(f"real id {real_id!r} is not registered")
        return self._histories[real_id]


def rsu_collect(batches: Iterable[Sequence]) -> list:
    """Relay reports to the server, preserving order and payloads."""
    collected = []
    for batch in batches:
        collected.extend(batch)
    return collected


def parse_histories_response(payload: str) -> list[WeightHistory | None]:
    """Decode the manager's JSON response into per-pid histories."""
    data = json.loads(payload)
    out: list[WeightHistory | None] = []
    for i, entries in enumerate(data["histories"]):
        if entries is None:
            out.append(None)
        else:
            out.append(WeightHistory(i, [(int(c), float(w)) for c, w in entries]))
    return out


def eairq_handle_cycle(
    masked_reports: Sequence[MaskedReport],
    perturbed_reports: Sequence[PerturbedReport],
    tm: TrustedManager,
    truth_histories: Mapping[str, TruthHistory],
    temporal_params: TemporalParams,
    solver_params: SolverParams,
    handling: HandlingParams,
    t: int,
    seed: int = 0,
    grid_ids: Iterable[str] | None = None,
    st_trace: SolverTrace | None = None,
    sst_trace: SolverTrace | None = None,
) -> CycleResult:
    """Fuse the masked and perturbed pipelines for one cycle.

    The caller owns the truth histories and appends the fused truths
    afterwards; fused weights are appended to the manager's ledger here.
    """
    pids = sorted(
        {r.pseudo_id for r in masked_reports} | {r.pseudo_id for r in perturbed_reports}
    )
    resolved = parse_histories_response(tm.histories_response(pids))
    weight_histories = {
        pid: (WeightHistory(pid, hist.entries) if hist is not None else WeightHistory(pid))
        for pid, hist in zip(pids, resolved)
    }

    observations = [
        Observation(source=r.pseudo_id, grid_id=e.grid_id, value=e.value, cycle=t)
        for r in perturbed_reports
        for e in r.entries
    ]
    counts: dict[str, int] = {}
    for obs in observations:
        counts[obs.grid_id] = counts.get(obs.grid_id, 0) + 1

    world = set(grid_ids) if grid_ids is not None else set()
    world.update(counts)
    world.update(truth_histories)

    sst_result = run_sst(
        observations, weight_histories, temporal_params, solver_params, t,
        grid_ids=world, trace=sst_trace,
    )
    st_result = run_airq(
        masked_reports, weight_histories, truth_histories, temporal_params,
        solver_params, t, seed=seed, grid_ids=world, trace=st_trace,
    )

    truths: dict[str, float] = {}
    status: dict[str, str] = {}
    provenance: dict[str, str] = {}
    for g in sorted(world):
        if counts.get(g, 0) >= handling.tau:
            truths[g] = sst_result.truths[g]
            status[g] = ESTIMATED
            provenance[g] = PROVENANCE_SST
        else:
            status[g] = st_result.status[g]
            if status[g] == ESTIMATED:
                truths[g] = st_result.truths[g]
                provenance[g] = PROVENANCE_ST
            elif status[g] == CARRIED_FORWARD:
                truths[g] = st_result.truths[g]
                provenance[g] = PROVENANCE_CARRIED
            else:
                provenance[g] = UNESTIMATED

    weights: dict[str, float] = {}
    for pid in pids:
        have = [
            r.weights[pid] for r in (st_result, sst_result) if pid in r.weights
        ]
        if have:
            weights[pid] = math.fsum(have) / len(have)
    tm.append_final_weights(weights, t)

    return CycleResult(
        cycle=t,
        truths=truths,
        weights=weights,
        iterations=st_result.iterations + sst_result.iterations,
        status=status,
        clamp_events=st_result.clamp_events + sst_result.clamp_events,
        floor_events=st_result.floor_events + sst_result.floor_events,
        provenance=provenance,
    )
