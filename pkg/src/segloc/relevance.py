"""Scalar relevance scores between nodes and the query.

Three ingredients drive tree building: the linguistic relevance of a node to
the query (sigmoid of the projected inner product), the visual relevance of
two nodes (cosine), and the combined merge score that ranks adjacent pairs.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .core import Config, DimensionError, ModelParams

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12


def sigmoid(z: float) -> float:
    # branch on sign to stay stable for large |z|
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def linguistic_relevance(v: np.ndarray, q: np.ndarray, params: ModelParams) -> float:
    """sigmoid((W1 v) . (W2 q)): how strongly a node feature matches the query."""
    if v.shape != q.shape or v.shape != (params.dim,):
        raise DimensionError(
            f"node {v.shape} / query {q.shape} do not match params dim {params.dim}"
        )
    return sigmoid(float(np.dot(params.W1 @ v, params.W2 @ q)))


def linguistic_relevance_projected(v: np.ndarray, w2q: np.ndarray, params: ModelParams) -> float:
    """Same as linguistic_relevance with the query projection precomputed."""
    return sigmoid(float(np.dot(params.W1 @ v, w2q)))


def visual_relevance(v_i: np.ndarray, v_j: np.ndarray) -> float:
    """Cosine similarity, clamped to [-1, 1]; zero for degenerate vectors."""
    ni = float(np.linalg.norm(v_i))
    nj = float(np.linalg.norm(v_j))
    if ni < DEGENERATE_NORM or nj < DEGENERATE_NORM:
        # padded or silenced frames must not poison pair ranking
        log.debug("degenerate vector in visual_relevance, returning 0.0")
        return 0.0
    c = float(np.dot(v_i, v_j)) / (ni * nj)
    return min(1.0, max(-1.0, c))


def merge_score(
    v_i: np.ndarray,
    v_j: np.ndarray,
    q: np.ndarray,
    params: ModelParams,
    cfg: Config,
) -> float:
    """Combined mergeability of an adjacent pair; higher means more mergeable.

    The linguistic term rewards pairs whose query relevances agree
    (1 - |r_i - r_j|), the visual term rewards cosine-similar features.
    """
    r_i = linguistic_relevance(v_i, q, params)
    r_j = linguistic_relevance(v_j, q, params)
    return cfg.lambda1 * (1.0 - abs(r_i - r_j)) + cfg.lambda2 * visual_relevance(v_i, v_j)


def node_prune_relevance(node_feature: np.ndarray, q: np.ndarray, params: ModelParams) -> float:
    """Per-node relevance used by the prune scan; delegates to linguistic_relevance."""
    return linguistic_relevance(node_feature, q, params)
