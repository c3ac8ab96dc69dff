"""Objective and subjective street-level greenery analysis."""

__version__ = "0.1.0"

from .ingest import (
    ClassMap,
    LabeledScene,
    Mask,
    TerrainPolicy,
    build_sky_mask,
    build_vegetation_mask,
    load_depth_map,
    load_label_map,
    spectral_vegetation_mask,
)
from .metrics import (
    MetricRow,
    SweepCurve,
    entropy_sweep,
    global_entropy,
    gvi,
    sky_view_index,
    spatial_entropy,
    vegetation_depth_stats,
    window_entropy,
)
from .scoring import (
    ComparisonRecord,
    GroupingContext,
    SkillRating,
    TrueSkillParams,
    filter_by_context,
    parse_comparisons,
    q_scores,
    score_table,
    trueskill_scores,
    trueskill_update,
)
from .stats import bland_altman, mann_whitney_u, pearson, qq_data, quantile_groups, wilcoxon_signed_rank
