"""Spectral slimming for convolutional networks.

Analyzes the eigenvalue spectrum of each conv layer's flattened filters to
decide how many filters carry the layer's variance, then prunes the rest and
re-chains every dependent tensor. Ships a binary weight container (.nwf), a
planning / pruning / accounting API, and the `3as` command-line tool.
"""

__version__ = "0.1.0"

from .errors import ArchslimError
from .model_stats import (
    ArchLayer,
    LayerStats,
    ModelStats,
    ReductionReport,
    apply_kept,
    architecture_from_network,
    count_stats,
    curve_csv,
    reduction_report,
)
from .prune_engine import (
    Criterion,
    GeometricMedianResult,
    geometric_median,
    prune_network,
    score_filters,
    select_survivors,
    survivor_sets,
)
from .slim_planner import (
    ArchitecturePlan,
    CouplingPolicy,
    PlanEntry,
    TargetSearchResult,
    plan_architecture,
    plan_from_json,
    plan_to_json,
    search_delta_for_target,
    student_manifest,
)
from .spectral_core import (
    LayerSpectrum,
    analyze_layer,
    covariance,
    cumulative_contribution,
    eigenvalues_descending,
    flatten_filters,
    information_measure,
    select_count,
)
from .weights_io import (
    LayerKind,
    LayerRecord,
    LayerTensor,
    NetworkWeights,
    build_network,
    deserialize,
    network_fingerprint,
    read_weights,
    serialize,
    write_weights,
)

__all__ = [
    "ArchLayer",
    "ArchitecturePlan",
    "ArchslimError",
    "Criterion",
    "CouplingPolicy",
    "GeometricMedianResult",
    "LayerKind",
    "LayerRecord",
    "LayerSpectrum",
    "LayerStats",
    "LayerTensor",
    "ModelStats",
    "NetworkWeights",
    "PlanEntry",
    "ReductionReport",
    "TargetSearchResult",
    "analyze_layer",
    "apply_kept",
    "architecture_from_network",
    "build_network",
    "count_stats",
    "covariance",
    "cumulative_contribution",
    "curve_csv",
    "deserialize",
    "eigenvalues_descending",
    "flatten_filters",
    "geometric_median",
    "information_measure",
    "network_fingerprint",
    "plan_architecture",
    "plan_from_json",
    "plan_to_json",
    "prune_network",
    "read_weights",
    "reduction_report",
    "score_filters",
    "search_delta_for_target",
    "select_count",
    "select_survivors",
    "serialize",
    "student_manifest",
    "survivor_sets",
    "write_weights",
]
