"""Class-adaptive multi-layer fusion and relevance/coverage pruning of visual tokens."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    AdapruneError,
    LayerStack,
    TokenMatrix,
    cosine_sim,
    l2_normalize_rows,
    validate_stack,
)
from .fusion import (  # noqa: E402
    ClassProfile,
    Projection,
    ProfileTable,
    align_layer,
    default_profiles,
    fuse,
    project,
    softmax_mixture,
)
from .pruner import (  # noqa: E402
    OpCounter,
    StageSchedule,
    prune_stage,
    run_schedule,
    split_budget,
)
from .router import RuleTable, default_rules, load_rules, route  # noqa: E402
from .saliency import AttentionRecord, attention_from_qk, saliency  # noqa: E402

__all__ = [
    "AdapruneError", "AttentionRecord", "ClassProfile", "LayerStack", "OpCounter", "ProfileTable",
    "Projection", "RuleTable", "StageSchedule", "TokenMatrix", "align_layer", "attention_from_qk",
    "cosine_sim", "default_profiles", "default_rules", "fuse", "l2_normalize_rows", "load_rules",
    "project", "prune_stage", "route", "run_schedule", "saliency", "softmax_mixture",
    "split_budget", "validate_stack",
]
