"""Experiment configuration and end-to-end orchestration.

One experiment fixes a world (either a station dataset or a synthetic
one), then steps through sensing cycles.  Each enabled algorithm gets the
same observations but keeps its own histories and randomness streams, so
enabling one algorithm can never change another's outputs:

* ``td``     -- plain baseline, nothing carried between cycles
* ``st``     -- full solver on plaintext reports
* ``sst``    -- simplified solver on plaintext reports
* ``airq``   -- full solver on masked reports
* ``eairq``  -- masked + perturbed dual pipeline behind pseudonyms

Vehicle-side work inside a cycle may fan out to threads; all randomness
is keyed, so the worker count cannot change any result.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import __version__ as _version
from . import streams
from .geo import SpatialParams, ThetaTable
from .masking import MaskSource, MaskedReport, build_masked_report, run_airq
from .metrics import MetricsAccumulator, MetricsTable, write_tables
from .parties import HandlingParams, TrustedManager, eairq_handle_cycle, rsu_collect
from .perturb import PerturbationParams, PerturbStats, build_perturbed_report
from .solvers import (
    CARRIED_FORWARD,
    UNESTIMATED,
    CycleResult,
    Observation,
    SolverParams,
    run_baseline_td,
    run_sst,
    run_st,
)
from .synth import (
    WorldParams,
    ReliabilityParams,
    assign_reliabilities,
    build_cycle,
    load_aqi_dataset,
    synth_grids,
    synth_truth_series,
    traffic_order,
    zipf_expected_counts,
)
from .temporal import TemporalParams, TruthHistory, WeightHistory

ALGORITHMS = ("td", "st", "sst", "airq", "eairq")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldParams = WorldParams()
    spatial: SpatialParams = SpatialParams()
    temporal: TemporalParams = TemporalParams()
    solver: SolverParams = SolverParams()
    perturbation: PerturbationParams = PerturbationParams()
    handling: HandlingParams = HandlingParams()
    algorithms: tuple[str, ...] = ("td", "airq", "eairq")
    seed: int = 1
    dataset: str | None = None
    output_dir: str = "out"

    def __post_init__(self):
        if not self.algorithms:
            raise ConfigError("at least one algorithm is required")
        unknown = [a for a in self.algorithms if a not in ALGORITHMS]
        if unknown:
            raise ConfigError(f"unknown algorithms {unknown}; choose from {ALGORITHMS}")
        if len(set(self.algorithms)) != len(self.algorithms):
            raise ConfigError("duplicate algorithm names")
        if not -(2**63) <= self.seed < 2**63:
            raise ConfigError("seed must fit in 64 bits")


def _normalize_algo(name: str) -> str:
    token = name.strip().lower()
    if token.endswith("-plain"):
        token = token[: -len("-plain")]
    return token


_SECTION_TYPES = {
    "world": WorldParams,
    "spatial": SpatialParams,
    "temporal": TemporalParams,
    "solver": SolverParams,
    "perturbation": PerturbationParams,
    "handling": HandlingParams,
}


def config_from_mapping(flat: Mapping[str, object]) -> ExperimentConfig:
    """Build a config from flat dotted keys (e.g. ``world.n``)."""
    sections: dict[str, dict] = {name: {} for name in _SECTION_TYPES}
    top: dict[str, object] = {}
    for key, value in flat.items():
        if "." in key:
            section, _, fieldname = key.partition(".")
            if section not in sections:
                raise ConfigError(f"unknown config section {section!r}")
            sections[section][fieldname] = value
        else:
            top[key] = value

    kwargs: dict[str, object] = {}
    try:
        for name, cls in _SECTION_TYPES.items():
            values = sections[name]
            fields = {f.name for f in dataclasses.fields(cls)}
            unknown = set(values) - fields
            if unknown:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
            if name == "world":
                for side in ("good", "bad"):
                    if side in values:
                        quad = values[side]
                        if not isinstance(quad, (list, tuple)) or len(quad) != 4:
                            raise ConfigError(
                                f"world.{side} must be [upper, lower, mean, sigma]"
                            )
                        values[side] = ReliabilityParams(*map(float, quad))
            kwargs[name] = cls(**values)
        allowed_top = {"algorithms", "seed", "dataset", "output_dir"}
        unknown = set(top) - allowed_top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "algorithms" in top:
            algos = top["algorithms"]
            if isinstance(algos, str):
                algos = [a for a in algos.replace(",", " ").split() if a]
            top["algorithms"] = tuple(_normalize_algo(a) for a in algos)
        if "seed" in top:
            top["seed"] = int(top["seed"])  # type: ignore[arg-type]
        return ExperimentConfig(**kwargs, **top)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    """Parse a flat ``key = value`` config file (values in JSON syntax)."""
    flat: dict[str, object] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {n}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{path}: line {n}: empty key")
        if key in flat:
            raise ConfigError(f"{path}: line {n}: duplicate key {key!r}")
        try:
            flat[key] = json.loads(value)
        except json.JSONDecodeError:
            flat[key] = value  # bare string (e.g. a path)
    return config_from_mapping(flat)


def config_to_mapping(config: ExperimentConfig) -> dict[str, object]:
    """Flatten a config back to dotted keys (canonical form for hashing)."""
    flat: dict[str, object] = {}
    for name in _SECTION_TYPES:
        section = getattr(config, name)
        for f in dataclasses.fields(section):
            value = getattr(section, f.name)
            if isinstance(value, ReliabilityParams):
                value = [value.upper, value.lower, value.mean, value.sigma]
            flat[f"{name}.{f.name}"] = value
    flat["algorithms"] = list(config.algorithms)
    flat["seed"] = config.seed
    flat["dataset"] = config.dataset
    return flat


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_mapping(config), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_config(config: ExperimentConfig, path) -> None:
    lines = []
    for key, value in sorted(config_to_mapping(config).items()):
        if value is None:
            continue
        lines.append(f"{key} = {json.dumps(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class RunRecord:
    """Everything one experiment produced, reproducible from (config, seed)."""

    config_hash: str
    seed: int
    cycles: int
    grid_ids: list[str]
    results: dict[str, list[CycleResult]]
    accumulator: MetricsAccumulator
    table: MetricsTable
    counters: dict[str, int]


@dataclass
class _World:
    grids: list
    series: dict
    thetas: ThetaTable
    grid_ids: list[str]
    ranks: list[int]  # traffic rank per grid index, 0 = busiest
    expected: list[float]  # expected pass-bys per grid index
    kappas: list[float]
    bad_flags: list[bool]
    cycles: int


def _prepare_world(config: ExperimentConfig) -> _World:
    world = config.world
    if config.dataset is not None:
        grids, series = load_aqi_dataset(config.dataset)
        available = min(len(s.values) for s in series.values())
        cycles = min(world.cycles, available)
    else:
        grids = synth_grids(world.m, config.seed)
        series = synth_truth_series(grids, world.cycles, config.seed)
        cycles = world.cycles
    thetas = ThetaTable.build(grids, config.spatial)
    m = len(grids)
    per_rank = zipf_expected_counts(m, world.zipf_exponent, world.total_passbys)
    ranks = traffic_order(m, config.seed)
    expected = [per_rank[ranks[i]] for i in range(m)]
    kappas, bad_flags = assign_reliabilities(world, config.seed)
    return _World(
        grids=grids,
        series=series,
        thetas=thetas,
        grid_ids=[g.id for g in grids],
        ranks=ranks,
        expected=expected,
        kappas=kappas,
        bad_flags=bad_flags,
        cycles=cycles,
    )


def _map_sources(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class _AlgoState:
    """Per-algorithm histories and identity machinery."""

    def __init__(self, algo: str, config: ExperimentConfig, world: _World):
        self.algo = algo
        self.weight_histories: dict = {}
        self.truth_histories: dict[str, TruthHistory] = {}
        self.solver_seed = streams.digest64(config.seed, algo)
        self.tm: TrustedManager | None = None
        self.published: dict[str, float] = {}
        if algo == "eairq":
            self.tm = TrustedManager(streams.digest64(config.seed, "tm"))
            for rid in range(config.world.n):
                self.tm.register(rid)

    def append(self, result: CycleResult, t: int) -> None:
        if self.algo in ("st", "sst", "airq", "eairq"):
            for g, v in result.truths.items():
                self.truth_histories.setdefault(g, TruthHistory(g)).append(t, v)
        if self.algo in ("st", "sst", "airq"):
            for s, w in result.weights.items():
                self.weight_histories.setdefault(s, WeightHistory(s)).append(t, w)
        # eairq weights live in the manager's ledger


def _run_cycle(
    state: _AlgoState,
    config: ExperimentConfig,
    world: _World,
    observations: list[Observation],
    t: int,
    workers: int,
    counters: dict[str, int],
) -> CycleResult:
    algo = state.algo
    if algo == "td":
        return run_baseline_td(observations, config.solver, t, grid_ids=world.grid_ids)
    if algo == "st":
        return run_st(
            observations, world.thetas, state.weight_histories, state.truth_histories,
            config.temporal, config.solver, t,
        )
    if algo == "sst":
        return run_sst(
            observations, state.weight_histories, config.temporal, config.solver, t,
            grid_ids=world.grid_ids,
        )

    by_source: dict[int, list[Observation]] = {}
    for obs in observations:
        by_source.setdefault(obs.source, []).append(obs)
    sources = sorted(by_source)

    if algo == "airq":
        def mask_one(rid: int) -> MaskedReport:
            masks = MaskSource(config.seed, "airq", rid)
            return build_masked_report(
                rid, str(rid), by_source[rid], world.thetas, masks, t
            )

        reports = rsu_collect([_map_sources(mask_one, sources, workers)])
        return run_airq(
            reports, state.weight_histories, state.truth_histories,
            config.temporal, config.solver, t,
            seed=state.solver_seed, grid_ids=world.grid_ids,
        )

    # eairq: pseudonyms, masked + perturbed families, dual solve
    tm = state.tm
    tm.begin_cycle(t)
    pids = {rid: tm.issue_pseudo_id(rid, t).token for rid in sources}
    published = state.published

    def build_both(rid: int):
        masks = MaskSource(config.seed, "eairq", rid)
        masked = build_masked_report(
            rid, pids[rid], by_source[rid], world.thetas, masks, t
        )
        perturbed, stats = build_perturbed_report(
            rid, pids[rid], by_source[rid], world.grid_ids, published,
            config.perturbation, config.seed, t,
        )
        return masked, perturbed, stats

    built = _map_sources(build_both, sources, workers)
    masked_reports = rsu_collect([[b[0] for b in built]])
    perturbed_reports = rsu_collect([[b[1] for b in built]])
    totals = PerturbStats()
    for _, _, stats in built:
        totals.merge(stats)
    for key in ("kept", "dropped", "imitated", "fallback_mean", "fallback_constant"):
        counters[f"eairq.{key}"] = counters.get(f"eairq.{key}", 0) + getattr(totals, key)

    result = eairq_handle_cycle(
        masked_reports, perturbed_reports, tm, state.truth_histories,
        config.temporal, config.solver, config.handling, t,
        seed=state.solver_seed, grid_ids=world.grid_ids,
    )
    state.published = dict(result.truths)
    return result


def run_experiment(config: ExperimentConfig, workers: int = 1) -> RunRecord:
    """Run every enabled algorithm over the configured world."""
    world = _prepare_world(config)
    states = {algo: _AlgoState(algo, config, world) for algo in config.algorithms}
    acc = MetricsAccumulator(config.algorithms, world.cycles)
    counters: dict[str, int] = {}
    results: dict[str, list[CycleResult]] = {a: [] for a in config.algorithms}

    for t in range(1, world.cycles + 1):
        real_now = {g.id: world.series[g.id].values[t - 1] for g in world.grids}
        observations = build_cycle(
            config.world, world.grids, world.kappas, real_now, world.expected,
            t, config.seed,
        )
        for algo in config.algorithms:
            result = _run_cycle(
                states[algo], config, world, observations, t, workers, counters
            )
            states[algo].append(result, t)
            results[algo].append(result)
            acc.record(algo, t - 1, result.truths, real_now)
            for key, value in (
                ("clamp_events", result.clamp_events),
                ("floor_events", result.floor_events),
                ("iterations", result.iterations),
                ("carried", sum(1 for s in result.status.values() if s == CARRIED_FORWARD)),
                ("unestimated", sum(1 for s in result.status.values() if s == UNESTIMATED)),
            ):
                counters[f"{algo}.{key}"] = counters.get(f"{algo}.{key}", 0) + value

    return RunRecord(
        config_hash=config_hash(config),
        seed=config.seed,
        cycles=world.cycles,
        grid_ids=world.grid_ids,
        results=results,
        accumulator=acc,
        table=acc.table(),
        counters=counters,
    )


def write_outputs(record: RunRecord, config: ExperimentConfig, out_dir) -> list[str]:
    """Write the metric tables plus a manifest; returns file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = write_tables(out, record.accumulator)
    manifest = {
        "config_hash": record.config_hash,
        "seed": record.seed,
        "algorithms": list(config.algorithms),
        "cycles": record.cycles,
        "grids": len(record.grid_ids),
        "version": _version,
        "counters": dict(sorted(record.counters.items())),
        "files": written,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return written + ["manifest.json"]


def dump_world(config: ExperimentConfig, path) -> int:
    """Write the generated world as JSON lines for replay; returns cycles."""
    world = _prepare_world(config)
    with open(path, "w") as fh:
        fh.write(
            json.dumps(
                {
                    "type": "world",
                    "seed": config.seed,
                    "n": config.world.n,
                    "m": len(world.grids),
                    "cycles": world.cycles,
                },
                sort_keys=True,
            )
            + "\n"
        )
        for i, g in enumerate(world.grids):
            fh.write(
                json.dumps(
                    {
                        "type": "grid",
                        "id": g.id,
                        "lat": g.latitude,
                        "lon": g.longitude,
                        "rank": world.ranks[i] + 1,
                        "expected_passbys": world.expected[i],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
        for rid in range(config.world.n):
            fh.write(
                json.dumps(
                    {
                        "type": "source",
                        "id": rid,
                        "kappa": world.kappas[rid],
                        "bad": world.bad_flags[rid],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
        for g in world.grids:
            fh.write(
                json.dumps(
                    {
                        "type": "truths",
                        "grid_id": g.id,
                        "values": list(world.series[g.id].values[: world.cycles]),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
        for t in range(1, world.cycles + 1):
            real_now = {g.id: world.series[g.id].values[t - 1] for g in world.grids}
            for obs in build_cycle(
                config.world, world.grids, world.kappas, real_now, world.expected,
                t, config.seed,
            ):
                fh.write(
                    json.dumps(
                        {
                            "type": "obs",
                            "cycle": t,
                            "source": obs.source,
                            "grid_id": obs.grid_id,
                            "value": obs.value,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
    return world.cycles
