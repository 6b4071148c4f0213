"""Privacy-preserving truth discovery for vehicular air-quality crowdsensing.

A library and CLI simulator for estimating per-grid air quality and
per-vehicle reliability from conflicting reports, with three trust
regimes: plaintext solvers, masked aggregation (server sees only sums),
and a perturbed/pseudonymous pipeline fusing two solvers per grid.
"""

__version__ = "0.1.0"

from .geo import Grid, SpatialParams, ThetaTable, geographical_distance, logical_distance
from .temporal import (
    AffinePair,
    TemporalParams,
    TruthHistory,
    WeightHistory,
    combine_truth,
    combine_weight,
    delta_for_truth,
    delta_for_weight,
    temporal_distance,
)
from .solvers import (
    CARRIED_FORWARD,
    ESTIMATED,
    UNESTIMATED,
    CycleResult,
    Observation,
    SolverParams,
    SolverTrace,
    run_baseline_td,
    run_sst,
    run_st,
)
from .masking import (
    ChiRow,
    MaskSource,
    MaskedReport,
    OpCounter,
    ProtocolError,
    aggregate_chi,
    build_masked_report,
    fx_decode,
    fx_encode,
    mask_sequence,
    run_airq,
)
from .perturb import (
    PerturbationParams,
    PerturbedObs,
    PerturbedReport,
    build_perturbed_report,
    grid_perturb,
    laplace_from_uniform,
    laplace_sample,
    value_perturb,
)
from .parties import (
    HandlingParams,
    PseudoId,
    SourceProfile,
    TrustedManager,
    eairq_handle_cycle,
    rsu_collect,
)
from .synth import (
    ReliabilityParams,
    TruthSeries,
    WorldParams,
    build_cycle,
    draw_passersby,
    draw_reliability,
    gen_observation,
    load_aqi_dataset,
    synth_grids,
    synth_truth_series,
    zipf_expected_counts,
)
from .metrics import daily_rmse, rmse, rmse_difference, valid_estimations
from .harness import (
    ConfigError,
    ExperimentConfig,
    RunRecord,
    config_from_mapping,
    config_hash,
    load_config,
    run_experiment,
    write_outputs,
)
