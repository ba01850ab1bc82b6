"""Token-level selective attention with a segmented KV cache.

Streams attend densely to a short initial prefix and a local window while a
learned low-dimensional scoring of the growing middle segment picks at most k
extra tokens per step; the two attention branches are fused by their
log-sum-exp weights. Includes the compression trainer, a closed-form FLOP
model, and a CLI experiment harness over a seeded toy transformer.
"""

from .analysis import (
    CostModel,
    cache_overhead_ratio,
    esa_flops,
    full_attention_flops,
    reduction_ratio_asymptotic,
    reduction_ratio_exact,
)
from .compression import (
    CalibrationSet,
    ProjectionPair,
    TrainConfig,
    TrainReport,
    approx_score,
    compress,
    identity_projections,
    pca_projections,
    random_projections,
    recall_at_k,
    train_projections,
)
from .engine import (
    EsaConfig,
    EsaEngine,
    FlopCounter,
    FusionResult,
    NeedleResult,
    OracleEngine,
    StepTrace,
    full_attention_oracle,
    fused_attention,
    planted_needle_recall,
)
from .errors import ConfigurationError, FormatError, TrainingError
from .kv_cache import CacheSizes, GatheredKv, MigrationEvent, SegmentedKvCache
from .selection import (
    ImportanceScores,
    SelectionResult,
    head_max_score,
    head_sum_score,
    normalize_scores,
    proximity_smooth,
    select_top_k,
)
from .tensor_core import (
    AttentionBranchOutput,
    RopeParams,
    apply_rope,
    apply_rope_rows,
    as_matrix,
    attention_branch,
    softmax_lse,
)
from .toy import ToyModel, ToyModelSpec

__version__ = "0.1.0"

__all__ = [
    "AttentionBranchOutput", "CacheSizes", "CalibrationSet", "ConfigurationError",
    "CostModel", "EsaConfig", "EsaEngine", "FlopCounter", "FormatError",
    "FusionResult", "GatheredKv", "ImportanceScores", "MigrationEvent",
    "NeedleResult", "OracleEngine", "ProjectionPair", "RopeParams",
    "SegmentedKvCache", "SelectionResult", "StepTrace", "ToyModel",
    "ToyModelSpec", "TrainConfig", "TrainReport", "TrainingError",
    "apply_rope", "apply_rope_rows", "approx_score", "as_matrix",
    "attention_branch", "cache_overhead_ratio", "compress", "esa_flops",
    "full_attention_flops", "full_attention_oracle", "fused_attention",
    "head_max_score", "head_sum_score", "identity_projections",
    "normalize_scores", "pca_projections", "planted_needle_recall",
    "proximity_smooth", "random_projections", "recall_at_k",
    "reduction_ratio_asymptotic", "reduction_ratio_exact", "select_top_k",
    "softmax_lse", "train_projections",
]
