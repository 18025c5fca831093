"""Query-guided segment trees for one-shot temporal localization."""

from .core import (
    Config,
    DecisionTrace,
    FrameFeatures,
    ModelParams,
    OneShotLabel,
    QueryEmbedding,
    SeglocError,
    VideoInstance,
    init_params,
    new_rng,
)
from .evaluate import oracle_build, recall_at, temporal_iou
from .hypotheses import extract_hypotheses, predict, select_positive, top_k
from .learning import (
    ForwardRecord,
    GradientSet,
    LossReport,
    backward_frozen,
    finite_diff_check,
    record_forward,
    replay_losses,
    train,
)
from .relevance import linguistic_relevance, merge_score, visual_relevance
from .tree import SegTree, audit_tree, build_tree, replay_build

__version__ = "0.1.0"

__all__ = [
    "Config",
    "DecisionTrace",
    "ForwardRecord",
    "FrameFeatures",
    "GradientSet",
    "LossReport",
    "ModelParams",
    "OneShotLabel",
    "QueryEmbedding",
    "SegTree",
    "SeglocError",
    "VideoInstance",
    "audit_tree",
    "backward_frozen",
    "build_tree",
    "extract_hypotheses",
    "finite_diff_check",
    "init_params",
    "linguistic_relevance",
    "merge_score",
    "new_rng",
    "oracle_build",
    "predict",
    "recall_at",
    "record_forward",
    "replay_build",
    "replay_losses",
    "select_positive",
    "temporal_iou",
    "top_k",
    "train",
    "visual_relevance",
]
