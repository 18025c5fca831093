"""Segment hypotheses: scoring, positive selection, top-K, inference rule.

Every active root of a built tree is one hypothesis for the queried moment.
The scoring head is a single linear layer squashed through a sigmoid; the
training-time sample set is the top-K by confidence with the positive root
(the one covering the labeled frame) force-included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    InvalidInputError,
    ModelParams,
    OneShotLabel,
    SegNode,
)
from .relevance import linguistic_relevance, sigmoid
from .tree import SegTree


@dataclass
class Hypothesis:
    root_id: int
    span: tuple[int, int]
    feature: np.ndarray
    confidence: float
    linguistic_rel: float
    is_positive: bool = False

    @property
    def n_frames(self) -> int:
        return self.span[1] - self.span[0] + 1


def score_hypothesis(feature: np.ndarray, params: ModelParams) -> float:
    """Confidence of one segment feature: sigmoid(w_s . v + b_s)."""
    return sigmoid(float(np.dot(params.w_s, feature)) + params.b_s)


def extract_hypotheses(tree: SegTree, q: np.ndarray, params: ModelParams) -> list[Hypothesis]:
    """One hypothesis per active root, in temporal order."""
    out = []
    for root_id in tree.active_roots:
        node: SegNode = tree.node(root_id)
        out.append(
            Hypothesis(
                root_id=root_id,
                span=node.span,
                feature=node.feature,
                confidence=score_hypothesis(node.feature, params),
                linguistic_rel=linguistic_relevance(node.feature, q, params),
            )
        )
    return out


def select_positive(hyps: list[Hypothesis], label: OneShotLabel) -> list[Hypothesis]:
    """Mark and return the hypotheses covering the labeled frame.

    Active spans are disjoint, so this is at most one hypothesis; with full
    coverage it is exactly one.
    """
    if not hyps:
        return []
    n_frames = max(h.span[1] for h in hyps) + 1
    if not 0 <= label.labeled_frame < n_frames:
        raise InvalidInputError(
            f"labeled frame {label.labeled_frame} outside video of {n_frames} frames"
        )
    positives = []
    for h in hyps:
        if h.span[0] <= label.labeled_frame <= h.span[1]:
            h.is_positive = True
            positives.append(h)
    return positives


def top_k(hyps: list[Hypothesis], k: int) -> tuple[list[Hypothesis], list[float]]:
    """Highest-confidence hypotheses and their scores, positive force-included.

    Ties break to the earlier start frame. When a positive exists but misses
    the cut, it replaces the weakest pick so the loss terms always see it.
    """
    if not hyps:
        raise InvalidInputError("no hypotheses to rank in an empty list")
    if k < 1:
        raise InvalidInputError(f"k must be positive, got {k}")
    ranked = sorted(hyps, key=lambda h: (-h.confidence, h.span[0]))
    picks = ranked[: min(k, len(ranked))]
    positive = next((h for h in hyps if h.is_positive), None)
    if positive is not None and positive not in picks:
        picks = picks[:-1] + [positive]
    return picks, [h.confidence for h in picks]


def predict(tree: SegTree, q: np.ndarray, params: ModelParams) -> tuple[int, int]:
    """Inference rule: the span of the most confident active root."""
    hyps = extract_hypotheses(tree, q, params)
    if not hyps:
        raise InvalidInputError("tree has no active roots")
    best = min(hyps, key=lambda h: (-h.confidence, h.span[0]))
    return best.span
