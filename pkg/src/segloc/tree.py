"""Hypothesis segment tree: relevance-guided merging plus windowed pruning.

Construction walks bottom-up from one leaf per frame. Each round scores all
temporally adjacent active pairs, keeps those at or above the merge threshold,
and greedily merges the top-alpha fraction (score-descending, ties to the
earlier pair). Every L rounds a prune scan removes freshly created non-leaf
nodes whose query relevance falls below tau, together with their in-window
relatives, frees the leaves underneath back into the merge pool and
down-weights every leaf feature.

All discrete decisions are appended to a DecisionTrace so that the exact
topology can be replayed later under perturbed parameters (frozen-topology
gradients, finite differences).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ACTIVE,
    MERGED,
    PRUNED,
    Config,
    DecisionTrace,
    DimensionError,
    DownweightEvent,
    FormatError,
    FrameFeatures,
    InvalidInputError,
    MergeEvent,
    ModelParams,
    PruneEvent,
    ReplayError,
    SegNode,
    StopEvent,
    TopologyError,
)
from .relevance import linguistic_relevance_projected, visual_relevance


@dataclass
class SegTree:
    """Mutable tree state during build: node store plus the active frontier."""

    nodes: list[SegNode]
    active_roots: list[int]  # temporal order, spans partition the frame range
    n_frames: int
    dim: int
    round: int = 0
    last_scan_round: int = 0
    trace: DecisionTrace = field(default_factory=DecisionTrace)
    dw_coeffs: list[float] = field(default_factory=list)  # applied scale per D event

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> SegNode:
        return self.nodes[node_id]

    def leaves_under(self, node_id: int) -> list[int]:
        """All leaf ids in the subtree of node_id, via children links."""
        out, stack = [], [node_id]
        while stack:
            n = self.nodes[stack.pop()]
            if n.is_leaf:
                out.append(n.node_id)
            else:
                stack.extend(n.children)
        return sorted(out)


class _QueryContext:
    """Per-build cache: projected query, node relevances, pair merge scores.

    Cached floats are the exact values the uncached functions would return
    (same operations on the same operands), so caching never changes a
    decision. The pair cache is dropped at every prune scan because leaf
    features change there.
    """

    def __init__(self, q: np.ndarray, params: ModelParams):
        self.params = params
        self.q = q
        self.w2q = params.W2 @ q
        self.node_rel: dict[int, float] = {}
        self.pair_score: dict[tuple[int, int], float] = {}

    def rel(self, tree: SegTree, node_id: int) -> float:
        r = self.node_rel.get(node_id)
        if r is None:
            r = linguistic_relevance_projected(tree.node(node_id).feature, self.w2q, self.params)
            self.node_rel[node_id] = r
        return r

    def score(self, tree: SegTree, left_id: int, right_id: int, cfg: Config) -> float:
        key = (left_id, right_id)
        s = self.pair_score.get(key)
        if s is None:
            r_i = self.rel(tree, left_id)
            r_j = self.rel(tree, right_id)
            cos = visual_relevance(tree.node(left_id).feature, tree.node(right_id).feature)
            s = cfg.lambda1 * (1.0 - abs(r_i - r_j)) + cfg.lambda2 * cos
            self.pair_score[key] = s
        return s

    def forget_pairs_of(self, node_ids) -> None:
        dead = set(node_ids)
        for key in [k for k in self.pair_score if k[0] in dead or k[1] in dead]:
            del self.pair_score[key]

    def on_scan(self) -> None:
        # every leaf feature may have changed; cheapest correct move
        self.node_rel.clear()
        self.pair_score.clear()


def init_leaves(features: FrameFeatures) -> SegTree:
    """One active leaf per frame, spans (i, i), features copied."""
    n = features.n_frames
    if n < 1:
        raise InvalidInputError("video must contain at least one frame")
    nodes = [
        SegNode(node_id=i, span=(i, i), feature=features.data[i].copy())
        for i in range(n)
    ]
    return SegTree(nodes=nodes, active_roots=list(range(n)), n_frames=n, dim=features.dim)


def select_merge_pairs(
    tree: SegTree,
    q: np.ndarray,
    params: ModelParams,
    cfg: Config,
    ctx: _QueryContext | None = None,
) -> list[tuple[int, int]]:
    """Pick this round's merges: top-alpha of eligible adjacent pairs.

    Pairs scoring below merge_stop_threshold are ineligible. The survivors are
    ranked score-descending (ties to the smaller left frame index) and accepted
    greedily while both nodes are unclaimed, up to ceil(alpha * eligible).
    """
    if len(tree.active_roots) < 2:
        return []
    if ctx is None:
        ctx = _QueryContext(q, params)
    eligible = []
    for left_id, right_id in zip(tree.active_roots, tree.active_roots[1:]):
        left, right = tree.node(left_id), tree.node(right_id)
        if left.span[1] + 1 != right.span[0]:
            continue
        s = ctx.score(tree, left_id, right_id, cfg)
        if s >= cfg.merge_stop_threshold:
            eligible.append((s, left.span[0], left_id, right_id))
    if not eligible:
        return []
    eligible.sort(key=lambda t: (-t[0], t[1]))
    cap = math.ceil(cfg.alpha * len(eligible))
    claimed: set[int] = set()
    accepted: list[tuple[int, int]] = []
    for _, _, left_id, right_id in eligible:
        if left_id in claimed or right_id in claimed:
            continue
        accepted.append((left_id, right_id))
        claimed.update((left_id, right_id))
        if len(accepted) >= cap:
            break
    return accepted


def merge_pair(
    tree: SegTree,
    left_id: int,
    right_id: int,
    params: ModelParams,
    ctx: _QueryContext | None = None,
) -> int:
    """Merge two adjacent active nodes into a fresh parent.

    Parent feature is W3 v_left + W3 v_right + b; the children leave the
    active frontier and the parent takes their place.
    """
    left, right = tree.node(left_id), tree.node(right_id)
    if left.state != ACTIVE or right.state != ACTIVE:
        raise TopologyError(f"merge of non-active nodes {left_id}, {right_id}")
    if left.span[1] + 1 != right.span[0]:
        raise TopologyError(
            f"nodes {left_id} {left.span} and {right_id} {right.span} are not adjacent"
        )
    feature = params.W3 @ left.feature + params.W3 @ right.feature + params.b
    new_id = tree.next_id
    node = SegNode(
        node_id=new_id,
        span=(left.span[0], right.span[1]),
        feature=feature,
        children=(left_id, right_id),
        height=max(left.height, right.height) + 1,
        created_round=tree.round,
    )
    tree.nodes.append(node)
    left.state = right.state = MERGED
    left.parent_id = right.parent_id = new_id
    pos = tree.active_roots.index(left_id)
    tree.active_roots[pos : pos + 2] = [new_id]
    tree.trace.append(MergeEvent(left_id, right_id, new_id, tree.round))
    if ctx is not None:
        ctx.forget_pairs_of((left_id, right_id))
    return new_id


def downweight_leaf(
    tree: SegTree,
    leaf_id: int,
    lam: float,
    q: np.ndarray,
    params: ModelParams,
    ctx: _QueryContext | None = None,
) -> float:
    """Scale a leaf feature by lam * r_qv(leaf); returns the applied scale."""
    leaf = tree.node(leaf_id)
    if not leaf.is_leaf:
        raise TopologyError(f"down-weight applied to non-leaf node {leaf_id}")
    if ctx is None:
        r = linguistic_relevance_projected(leaf.feature, params.W2 @ q, params)
    else:
        r = ctx.rel(tree, leaf_id)
    coeff = lam * r
    leaf.feature *= coeff
    leaf.leaf_weight_lambda = lam
    leaf.downweighted = True
    tree.trace.append(DownweightEvent(leaf_id, lam, tree.round))
    tree.dw_coeffs.append(coeff)
    return coeff


def _prune_closure(tree: SegTree, base: set[int], window_start: int) -> set[int]:
    """Close the sub-tau set upward over ancestors and downward in the window.

    Ancestors always fall: they are newer than their children, so they sit
    inside the scan window, and a surviving ancestor would keep a live span
    over the leaves the prune is about to free. Downward the cut stops at the
    window edge: descendants created in the current window fall with their
    ancestor, while older non-leaves already passed a scan of their own and
    stay behind as dead interior records (never active again, never
    rescanned). Every leaf underneath returns to the pool either way.
    """
    doomed = set(base)
    up = list(base)
    while up:
        pid = tree.node(up.pop()).parent_id
        if pid is not None and pid not in doomed:
            doomed.add(pid)
            up.append(pid)
    down = list(doomed)
    visited = set(doomed)
    while down:
        for cid in tree.node(down.pop()).children:
            if cid in visited:
                continue
            visited.add(cid)
            child = tree.node(cid)
            if child.is_leaf:
                continue
            if child.created_round > window_start:
                doomed.add(cid)
            down.append(cid)
    return doomed


def _apply_prune_batch(tree: SegTree, node_ids: list[int]) -> set[int]:
    """Mark nodes pruned, drop them from the frontier, free their leaves.

    Returns the set of re-activated leaf ids. Leaves under a pruned subtree
    are always merged_away beforehand (the subtree top was an active root),
    so re-activation restores exactly the coverage the prune removed.
    """
    doomed = set(node_ids)
    freed: set[int] = set()
    for nid in node_ids:
        node = tree.node(nid)
        if node.is_leaf:
            raise TopologyError(f"prune applied to leaf {nid}")
        node.state = PRUNED
        freed.update(tree.leaves_under(nid))
    tree.active_roots = [r for r in tree.active_roots if r not in doomed]
    for leaf_id in sorted(freed):
        leaf = tree.node(leaf_id)
        if leaf.state != MERGED:
            raise TopologyError(f"freed leaf {leaf_id} was {leaf.state}, not merged")
        leaf.state = ACTIVE
        leaf.parent_id = None
        tree.active_roots.append(leaf_id)
    tree.active_roots.sort(key=lambda nid: tree.node(nid).span[0])
    return freed


def prune_scan(
    tree: SegTree,
    q: np.ndarray,
    params: ModelParams,
    cfg: Config,
    ctx: _QueryContext | None = None,
) -> None:
    """Prune the window's query-irrelevant non-leaves and down-weight leaves.

    The window is every merge round since the previous scan. Non-leaf nodes
    created there with relevance below tau are removed together with their
    closure; their leaves return to the frontier at lam 0.5, every other leaf
    is re-weighted at lam 1.0.
    """
    if ctx is None:
        ctx = _QueryContext(q, params)
    window_start = tree.last_scan_round
    base = {
        n.node_id
        for n in tree.nodes
        if not n.is_leaf
        and n.state != PRUNED
        and n.created_round > window_start
        and ctx.rel(tree, n.node_id) < cfg.tau
    }
    freed: set[int] = set()
    if base:
        doomed = sorted(_prune_closure(tree, base, window_start))
        for nid in doomed:
            tree.trace.append(PruneEvent(nid, tree.round))
        freed = _apply_prune_batch(tree, doomed)
    for leaf_id in range(tree.n_frames):
        if cfg.downweight_once and tree.node(leaf_id).downweighted:
            continue
        lam = 0.5 if leaf_id in freed else 1.0
        downweight_leaf(tree, leaf_id, lam, q, params, ctx)
    ctx.on_scan()
    tree.last_scan_round = tree.round


def build_tree(
    features: FrameFeatures,
    q: np.ndarray,
    params: ModelParams,
    cfg: Config,
    audit_each_round: bool = False,
) -> SegTree:
    """Full build loop: merge rounds, periodic prune scans, final audit scan.

    Stops when no pair is eligible or after n_frames - 1 merge rounds; the
    round cap guarantees termination even when scans keep re-opening leaves.
    A final scan runs if any merge round happened after the last periodic one,
    so every surviving non-leaf has passed the tau test.
    """
    if features.dim != q.shape[0] or features.dim != params.dim:
        raise DimensionError(
            f"dims differ: features {features.dim}, query {q.shape[0]}, params {params.dim}"
        )
    tree = init_leaves(features)
    ctx = _QueryContext(q, params)
    max_rounds = tree.n_frames - 1
    while tree.round < max_rounds:
        pairs = select_merge_pairs(tree, q, params, cfg, ctx)
        if not pairs:
            break
        tree.round += 1
        for left_id, right_id in pairs:
            merge_pair(tree, left_id, right_id, params, ctx)
        if tree.round % cfg.L == 0:
            prune_scan(tree, q, params, cfg, ctx)
        if audit_each_round:
            audit_tree(tree)
    if tree.round > tree.last_scan_round:
        prune_scan(tree, q, params, cfg, ctx)
        if audit_each_round:
            audit_tree(tree)
    tree.trace.append(StopEvent(tree.round))
    return tree


def replay_build(
    features: FrameFeatures,
    q: np.ndarray,
    params: ModelParams,
    trace: DecisionTrace,
    frozen_coeffs: list[float] | None = None,
) -> SegTree:
    """Rebuild a tree from its trace: decisions fixed, features recomputed.

    With frozen_coeffs the recorded down-weight scales are reused verbatim
    (parameters only influence merge features), which is what keeps replayed
    losses smooth for finite differences. Without them the scales are
    recomputed from the given parameters.
    """
    tree = init_leaves(features)
    w2q = params.W2 @ q
    pending: list[PruneEvent] = []
    n_dw = 0

    def flush() -> None:
        if pending:
            _apply_prune_batch(tree, [e.node_id for e in pending])
            tree.trace.events.extend(pending)
            pending.clear()

    for event in trace:
        if isinstance(event, MergeEvent):
            flush()
            tree.round = event.round
            if event.new_id != tree.next_id:
                raise ReplayError(
                    f"trace expects node {event.new_id}, builder is at {tree.next_id}"
                )
            try:
                merge_pair(tree, event.left_id, event.right_id, params)
            except TopologyError as exc:
                raise ReplayError(f"merge event does not fit the input: {exc}") from exc
        elif isinstance(event, PruneEvent):
            tree.round = event.round
            pending.append(event)
        elif isinstance(event, DownweightEvent):
            flush()
            tree.round = event.round
            leaf = tree.node(event.leaf_id)
            if not leaf.is_leaf:
                raise ReplayError(f"down-weight event on non-leaf {event.leaf_id}")
            if frozen_coeffs is not None:
                coeff = frozen_coeffs[n_dw]
                leaf.feature *= coeff
                leaf.leaf_weight_lambda = event.lam
                leaf.downweighted = True
                tree.trace.append(event)
                tree.dw_coeffs.append(coeff)
            else:
                r = linguistic_relevance_projected(leaf.feature, w2q, params)
                coeff = event.lam * r
                leaf.feature *= coeff
                leaf.leaf_weight_lambda = event.lam
                leaf.downweighted = True
                tree.trace.append(event)
                tree.dw_coeffs.append(coeff)
            n_dw += 1
        elif isinstance(event, StopEvent):
            flush()
            tree.round = event.round
            tree.trace.append(StopEvent(event.round))
        else:
            raise ReplayError(f"unknown trace event {event!r}")
    flush()
    return tree


def audit_tree(tree: SegTree) -> None:
    """Check every structural invariant; raise TopologyError on violation."""
    for node in tree.nodes:
        single = node.span[0] == node.span[1]
        if node.is_leaf != (node.height == 0) or node.is_leaf != single:
            raise TopologyError(f"leaf flags disagree on node {node.node_id}")
        if node.span[0] > node.span[1] or node.span[0] < 0 or node.span[1] >= tree.n_frames:
            raise TopologyError(f"bad span {node.span} on node {node.node_id}")
        if not node.is_leaf:
            left, right = (tree.node(c) for c in node.children)
            if left.span[1] + 1 != right.span[0]:
                raise TopologyError(f"children of {node.node_id} are not adjacent")
            if node.span != (left.span[0], right.span[1]):
                raise TopologyError(f"span of {node.node_id} is not the children's union")
            if node.height != max(left.height, right.height) + 1:
                raise TopologyError(f"height of {node.node_id} inconsistent")
    active_set = set(tree.active_roots)
    for node in tree.nodes:
        if node.state == ACTIVE and node.node_id not in active_set:
            raise TopologyError(f"active node {node.node_id} missing from frontier")
    covered = 0
    prev_end = -1
    for nid in tree.active_roots:
        node = tree.node(nid)
        if node.state != ACTIVE:
            raise TopologyError(f"frontier lists non-active node {nid}")
        if node.span[0] <= prev_end:
            raise TopologyError(f"active spans overlap or are unsorted at node {nid}")
        prev_end = node.span[1]
        covered += node.n_frames
        pid = node.parent_id
        while pid is not None:
            parent = tree.node(pid)
            if parent.state == ACTIVE:
                raise TopologyError(f"active node {nid} has active ancestor {pid}")
            pid = parent.parent_id
        # everything inside a live subtree is plain merged interior; freed
        # leaves or pruned records below an active root would mean the prune
        # batch left overlapping structure behind
        stack = list(node.children)
        while stack:
            child = tree.node(stack.pop())
            if child.state != MERGED:
                raise TopologyError(
                    f"descendant {child.node_id} of active root {nid} is {child.state}"
                )
            stack.extend(child.children)
    if covered != tree.n_frames:
        raise TopologyError(
            f"active spans cover {covered} frames, expected {tree.n_frames}"
        )


# --- trace text format ----------------------------------------------------------

def trace_to_text(trace: DecisionTrace) -> str:
    """One event per line: M/P/D/S records with base-10 integers."""
    lines = []
    for event in trace:
        if isinstance(event, MergeEvent):
            lines.append(f"M {event.left_id} {event.right_id} {event.new_id} {event.round}")
        elif isinstance(event, PruneEvent):
            lines.append(f"P {event.node_id} {event.round}")
        elif isinstance(event, DownweightEvent):
            lines.append(f"D {event.leaf_id} {event.lam!r} {event.round}")
        elif isinstance(event, StopEvent):
            lines.append(f"S {event.round}")
        else:
            raise FormatError(f"unknown trace event {event!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def trace_from_text(text: str) -> DecisionTrace:
    trace = DecisionTrace()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            kind = parts[0]
            if kind == "M" and len(parts) == 5:
                trace.append(MergeEvent(*map(int, parts[1:])))
            elif kind == "P" and len(parts) == 3:
                trace.append(PruneEvent(int(parts[1]), int(parts[2])))
            elif kind == "D" and len(parts) == 4:
                trace.append(DownweightEvent(int(parts[1]), float(parts[2]), int(parts[3])))
            elif kind == "S" and len(parts) == 2:
                trace.append(StopEvent(int(parts[1])))
            else:
                raise ValueError(f"unrecognized record {line!r}")
        except ValueError as exc:
            raise FormatError(f"trace line {lineno}: {exc}") from exc
    return trace
