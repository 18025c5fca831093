"""Recall metrics over temporal spans plus the naive reference builder.

The oracle here rebuilds the segment tree with scalar loops and a full pair
rescan every round. It shares no numerics with the fast builder beyond the
language runtime: sigmoids go through math.exp, inner products are explicit
sums, and nothing is cached. Acceptance runs compare the two on small
instances, which is the main correctness argument for the tree module.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ACTIVE,
    MERGED,
    PRUNED,
    Config,
    DecisionTrace,
    DownweightEvent,
    FrameFeatures,
    InvalidInputError,
    MergeEvent,
    ModelParams,
    OracleLimitError,
    PruneEvent,
    SegNode,
    StopEvent,
)
from .tree import SegTree

log = logging.getLogger(__name__)

ORACLE_MAX_FRAMES = 12

IOU_THRESHOLDS = (0.3, 0.5, 0.7)
RECALL_RANKS = (1, 5)


def temporal_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """Intersection over union in frame counts; spans are inclusive."""
    for span in (a, b):
        if span[0] > span[1]:
            raise InvalidInputError(f"span {span} has start after end")
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def recall_at(
    preds: dict[str, list[tuple[int, int]]],
    gts: dict[str, tuple[int, int]],
    n: int,
    m: float,
) -> float:
    """Fraction of videos whose top-n predictions contain an IoU >= m hit.

    Videos without ground truth are skipped with a warning; the fraction is
    over the covered videos only.
    """
    if n < 1:
        raise InvalidInputError(f"rank cutoff must be positive, got {n}")
    if not 0.0 < m <= 1.0:
        raise InvalidInputError(f"IoU threshold must be in (0, 1], got {m}")
    hits = 0
    covered = 0
    for video_id, spans in preds.items():
        if not spans:
            raise InvalidInputError(f"video {video_id!r} has no predictions")
        gt = gts.get(video_id)
        if gt is None:
            log.warning("video %r has no ground truth, skipping", video_id)
            continue
        covered += 1
        if any(temporal_iou(span, gt) >= m for span in spans[:n]):
            hits += 1
    if covered == 0:
        raise InvalidInputError("no video had ground truth to evaluate against")
    return hits / covered


@dataclass
class EvalResult:
    grid: dict[tuple[int, float], float]
    per_video: list[tuple[str, float]] = field(default_factory=list)
    covered: int = 0
    total: int = 0


def evaluate_predictions(
    preds: dict[str, list[tuple[int, int]]],
    gts: dict[str, tuple[int, int]],
    ranks: tuple[int, ...] = RECALL_RANKS,
    thresholds: tuple[float, ...] = IOU_THRESHOLDS,
) -> EvalResult:
    grid = {(n, m): recall_at(preds, gts, n, m) for n in ranks for m in thresholds}
    per_video = []
    covered = 0
    for video_id, spans in preds.items():
        gt = gts.get(video_id)
        if gt is None:
            continue
        covered += 1
        best = max(temporal_iou(s, gt) for s in spans[: max(ranks)])
        per_video.append((video_id, best))
    return EvalResult(grid=grid, per_video=per_video, covered=covered, total=len(preds))


def format_report(
    result: EvalResult,
    ranks: tuple[int, ...] = RECALL_RANKS,
    thresholds: tuple[float, ...] = IOU_THRESHOLDS,
) -> str:
    """Stable text grid: header `n\\m 0.3 0.5 0.7`, one row per rank cutoff."""
    lines = ["n\\m " + " ".join(f"{m:g}" for m in thresholds)]
    for n in ranks:
        cells = " ".join(f"{result.grid[(n, m)]:.4f}" for m in thresholds)
        lines.append(f"{n} {cells}")
    return "\n".join(lines) + "\n"


# --- naive reference builder --------------------------------------------------------

def _o_sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    t = math.exp(z)
    return t / (1.0 + t)


def _o_matvec(m, v):
    return [sum(m[i][j] * v[j] for j in range(len(v))) for i in range(len(m))]


def _o_dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _o_rel(v, q, W1, W2):
    return _o_sigmoid(_o_dot(_o_matvec(W1, v), _o_matvec(W2, q)))


def _o_cosine(a, b):
    na = math.sqrt(_o_dot(a, a))
    nb = math.sqrt(_o_dot(b, b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    c = _o_dot(a, b) / (na * nb)
    return min(1.0, max(-1.0, c))


def oracle_build(
    features: FrameFeatures, q: np.ndarray, params: ModelParams, cfg: Config
) -> SegTree:
    """Scalar-loop rebuild of the full construction for small inputs.

    Every round rescans all adjacent pairs from scratch; every scan rescans
    all nodes. Deliberately slow and only structured for readability against
    the construction rules, hence the frame-count guard.
    """
    n = features.n_frames
    if n > ORACLE_MAX_FRAMES:
        raise OracleLimitError(
            f"oracle accepts at most {ORACLE_MAX_FRAMES} frames, got {n}"
        )
    d = features.dim
    W1 = [[float(params.W1[i][j]) for j in range(d)] for i in range(d)]
    W2 = [[float(params.W2[i][j]) for j in range(d)] for i in range(d)]
    W3 = [[float(params.W3[i][j]) for j in range(d)] for i in range(d)]
    bias = [float(params.b[j]) for j in range(d)]
    qv = [float(q[j]) for j in range(d)]

    feats: list[list[float]] = [[float(x) for x in features.data[i]] for i in range(n)]
    spans: list[tuple[int, int]] = [(i, i) for i in range(n)]
    children: list[tuple[int, ...]] = [() for _ in range(n)]
    heights: list[int] = [0] * n
    states: list[str] = [ACTIVE] * n
    created: list[int] = [0] * n
    parents: list[int | None] = [None] * n
    lambdas: list[float] = [1.0] * n
    downweighted: list[bool] = [False] * n
    roots: list[int] = list(range(n))
    trace = DecisionTrace()
    dw_coeffs: list[float] = []
    rnd = 0
    last_scan = 0

    def scan() -> None:
        nonlocal last_scan, roots
        doomed: list[int] = []
        for nid in range(len(feats)):
            if children[nid] and states[nid] != PRUNED and created[nid] > last_scan:
                if _o_rel(feats[nid], qv, W1, W2) < cfg.tau:
                    if nid not in doomed:
                        doomed.append(nid)
        # ancestors of sub-tau nodes always fall with them; descendants fall
        # only when created inside the scan window, older ones stay behind
        # as dead interior records (children are always older than parents,
        # so the walk can stop at the first out-of-window node)
        queue = list(doomed)
        while queue:
            nid = queue.pop()
            pid = parents[nid]
            if pid is not None and pid not in doomed:
                doomed.append(pid)
                queue.append(pid)
            for cid in children[nid]:
                if children[cid] and cid not in doomed and created[cid] > last_scan:
                    doomed.append(cid)
                    queue.append(cid)
        doomed.sort()
        freed: list[int] = []
        for nid in doomed:
            trace.append(PruneEvent(nid, rnd))
            states[nid] = PRUNED
            stack = [nid]
            while stack:
                x = stack.pop()
                if children[x]:
                    stack.extend(children[x])
                elif x not in freed:
                    freed.append(x)
        roots = [r for r in roots if r not in doomed]
        for leaf in sorted(freed):
            states[leaf] = ACTIVE
            parents[leaf] = None
            roots.append(leaf)
        roots.sort(key=lambda r: spans[r][0])
        for leaf in range(n):
            if cfg.downweight_once and downweighted[leaf]:
                continue
            lam = 0.5 if leaf in freed else 1.0
            coeff = lam * _o_rel(feats[leaf], qv, W1, W2)
            feats[leaf] = [x * coeff for x in feats[leaf]]
            lambdas[leaf] = lam
            downweighted[leaf] = True
            trace.append(DownweightEvent(leaf, lam, rnd))
            dw_coeffs.append(coeff)
        last_scan = rnd

    while rnd < n - 1:
        # score all adjacent active pairs, fresh every time
        eligible = []
        for k in range(len(roots) - 1):
            li, ri = roots[k], roots[k + 1]
            if spans[li][1] + 1 != spans[ri][0]:
                continue
            r_i = _o_rel(feats[li], qv, W1, W2)
            r_j = _o_rel(feats[ri], qv, W1, W2)
            score = cfg.lambda1 * (1.0 - abs(r_i - r_j)) + cfg.lambda2 * _o_cosine(
                feats[li], feats[ri]
            )
            if score >= cfg.merge_stop_threshold:
                eligible.append((score, spans[li][0], li, ri))
        if not eligible:
            break
        eligible.sort(key=lambda t: (-t[0], t[1]))
        cap = math.ceil(cfg.alpha * len(eligible))
        taken: list[tuple[int, int]] = []
        used: set[int] = set()
        for _, _, li, ri in eligible:
            if li in used or ri in used:
                continue
            taken.append((li, ri))
            used.update((li, ri))
            if len(taken) >= cap:
                break
        rnd += 1
        for li, ri in taken:
            new_id = len(feats)
            merged = [
                _o_dot(W3[i], feats[li]) + _o_dot(W3[i], feats[ri]) + bias[i]
                for i in range(d)
            ]
            feats.append(merged)
            spans.append((spans[li][0], spans[ri][1]))
            children.append((li, ri))
            heights.append(max(heights[li], heights[ri]) + 1)
            states.append(ACTIVE)
            created.append(rnd)
            parents.append(None)
            lambdas.append(1.0)
            downweighted.append(False)
            states[li] = states[ri] = MERGED
            parents[li] = parents[ri] = new_id
            pos = roots.index(li)
            roots[pos : pos + 2] = [new_id]
            trace.append(MergeEvent(li, ri, new_id, rnd))
        if rnd % cfg.L == 0:
            scan()
    if rnd > last_scan:
        scan()
    trace.append(StopEvent(rnd))

    nodes = [
        SegNode(
            node_id=i,
            span=spans[i],
            feature=np.array(feats[i], dtype=np.float64),
            children=children[i],
            height=heights[i],
            state=states[i],
            leaf_weight_lambda=lambdas[i],
            created_round=created[i],
            parent_id=parents[i],
            downweighted=downweighted[i],
        )
        for i in range(len(feats))
    ]
    tree = SegTree(
        nodes=nodes,
        active_roots=list(roots),
        n_frames=n,
        dim=d,
        round=rnd,
        last_scan_round=last_scan,
        trace=trace,
        dw_coeffs=dw_coeffs,
    )
    return tree


def trees_equal_topology(a: SegTree, b: SegTree) -> bool:
    """Same node count, spans, children, states, frontier, and trace."""
    if len(a.nodes) != len(b.nodes) or a.active_roots != b.active_roots:
        return False
    for na, nb in zip(a.nodes, b.nodes):
        if (
            na.span != nb.span
            or na.children != nb.children
            or na.state != nb.state
            or na.height != nb.height
            or na.created_round != nb.created_round
        ):
            return False
    return list(a.trace) == list(b.trace)


def trees_feature_gap(a: SegTree, b: SegTree) -> float:
    """Largest absolute feature difference across matching nodes."""
    if len(a.nodes) != len(b.nodes):
        raise InvalidInputError("trees differ in node count")
    gap = 0.0
    for na, nb in zip(a.nodes, b.nodes):
        gap = max(gap, float(np.max(np.abs(na.feature - nb.feature))))
    return gap
