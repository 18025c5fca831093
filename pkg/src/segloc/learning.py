"""Self-supervised losses, frozen-topology gradients, and a small trainer.

The forward pass of one video is recorded once: the decision trace, the
down-weight scales actually applied, the chosen top-K roots, their rewards,
and the sampled negative spans. Re-running that record under different
parameters keeps every discrete choice fixed and treats the recorded scales
and rewards as constants, so the replayed total loss is a smooth function of
the parameters wherever the clamp and hinge do not switch branches. Analytic
gradients walk the same replayed computation in reverse, which is what makes
central finite differences a valid oracle for them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Config,
    DecisionTrace,
    DownweightEvent,
    FrameFeatures,
    InvalidInputError,
    MergeEvent,
    ModelParams,
    OneShotLabel,
    TrainingError,
    VideoInstance,
)
from .hypotheses import Hypothesis, extract_hypotheses, select_positive, top_k
from .relevance import sigmoid
from .tree import build_tree

CLIP = 1e-7  # BCE probability clamp; clamped terms contribute zero gradient


@dataclass
class LossReport:
    rank_loss: float
    inter_loss: float
    intra_loss: float
    total: float
    rewards: list[float] = field(default_factory=list)

    def is_finite(self) -> bool:
        return all(
            math.isfinite(x)
            for x in (self.rank_loss, self.inter_loss, self.intra_loss, self.total)
        )


@dataclass
class GradientSet:
    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    b: np.ndarray
    w_s: np.ndarray
    b_s: float

    @classmethod
    def zeros(cls, d: int) -> "GradientSet":
        return cls(
            W1=np.zeros((d, d)),
            W2=np.zeros((d, d)),
            W3=np.zeros((d, d)),
            b=np.zeros(d),
            w_s=np.zeros(d),
            b_s=0.0,
        )

    def max_abs(self) -> float:
        m = abs(self.b_s)
        for arr in (self.W1, self.W2, self.W3, self.b, self.w_s):
            if arr.size:
                m = max(m, float(np.max(np.abs(arr))))
        return m


# --- loss primitives --------------------------------------------------------------

REWARD_DECAY = 0.25  # geometric falloff of the order-based reward over the K picks


def reward(hyp: Hypothesis) -> float:
    """Detached reward: the hypothesis' own linguistic relevance."""
    return hyp.linguistic_rel


def shape_rewards(base: list[float], decay: float = REWARD_DECAY) -> list[float]:
    """Turn raw pick relevances into a fixed distribution over their ranking.

    As the relevance head sharpens, the raw values saturate and become nearly
    equal, and equal rewards pull the score softmax toward uniform, undoing
    whatever ordering the scoring head has learned. Rewarding the relevance
    ORDER instead keeps the target distribution fixed no matter how saturated
    the values get: position p in the descending ranking earns decay^p,
    normalized to sum to one. Ties resolve by list position.
    """
    order = sorted(range(len(base)), key=lambda j: (-base[j], j))
    weights = [decay**p for p in range(len(base))]
    total = sum(weights)
    shaped = [0.0] * len(base)
    for p, j in enumerate(order):
        shaped[j] = weights[p] / total
    return shaped


def rank_loss(scores: list[float], rewards: list[float]) -> float:
    """Reward-weighted negative log-softmax over the K confidence scores."""
    if not scores:
        raise InvalidInputError("rank loss needs at least one scored hypothesis")
    if len(scores) != len(rewards):
        raise InvalidInputError("scores and rewards must pair up one to one")
    s = np.asarray(scores, dtype=np.float64)
    shifted = s - np.max(s)
    log_p = shifted - math.log(float(np.sum(np.exp(shifted))))
    return float(-np.dot(np.asarray(rewards, dtype=np.float64), log_p))


def inter_loss(rel_lists: list[list[float]], labels: list[int]) -> float:
    """Binary cross-entropy over matched and unmatched video-query pairs.

    Each inner list holds the top-K relevances of one pairing; the label says
    whether the query belongs to the video. Mean reduction over all terms.
    """
    if len(rel_lists) != len(labels):
        raise InvalidInputError("one label per relevance list required")
    if not rel_lists:
        raise InvalidInputError("inter loss needs at least one pairing")
    total = 0.0
    count = 0
    for rels, y in zip(rel_lists, labels):
        for r in rels:
            r = min(max(r, CLIP), 1.0 - CLIP)
            total += -y * math.log(r) - (1 - y) * math.log(1.0 - r)
            count += 1
    if count == 0:
        raise InvalidInputError("inter loss received only empty relevance lists")
    return total / count


def intra_loss(pos: list[float], neg: list[float], beta: float) -> float:
    """Hinge on the relevance margin between each top-K root and its negative."""
    if len(pos) != len(neg):
        raise InvalidInputError("need one negative relevance per positive")
    return float(sum(max(0.0, beta - p + n) for p, n in zip(pos, neg)))


# --- forward recording ------------------------------------------------------------

@dataclass
class NegativeSample:
    """A contiguous span inside the video, or a frozen cross-video feature."""

    span: tuple[int, int] | None
    vector: np.ndarray | None
    cross_video: bool


@dataclass
class ForwardRecord:
    """Everything needed to replay one video's loss with decisions frozen."""

    features: FrameFeatures
    q: np.ndarray
    q_wrong: np.ndarray
    label: OneShotLabel
    cfg: Config
    trace: DecisionTrace
    dw_coeffs: list[float]
    pick_ids: list[int]
    pick_spans: list[tuple[int, int]]
    rewards: list[float]
    negatives: list[NegativeSample]
    _tape: "_MergeTape | None" = None

    def tape(self) -> "_MergeTape":
        if self._tape is None:
            self._tape = _MergeTape.compile(self)
        return self._tape


def free_gaps(n_frames: int, blocked: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Maximal frame intervals not covered by any blocked span."""
    gaps = []
    cursor = 0
    for s, e in sorted(blocked):
        if s > cursor:
            gaps.append((cursor, s - 1))
        cursor = max(cursor, e + 1)
    if cursor < n_frames:
        gaps.append((cursor, n_frames - 1))
    return gaps


def sample_negative_span(
    gaps: list[tuple[int, int]], rng: np.random.Generator
) -> tuple[int, int]:
    g0, g1 = gaps[int(rng.integers(len(gaps)))]
    s = int(rng.integers(g0, g1 + 1))
    e = int(rng.integers(s, g1 + 1))
    return (s, e)


def record_forward(
    features: FrameFeatures,
    q: np.ndarray,
    q_wrong: np.ndarray,
    label: OneShotLabel,
    params: ModelParams,
    cfg: Config,
    rng: np.random.Generator,
    fallback_features: FrameFeatures | None = None,
) -> ForwardRecord:
    """Build the tree once and freeze every discrete decision for later replay.

    Negatives are random contiguous spans that overlap none of the top-K
    spans. When the picks cover the whole video the negative falls back to
    the mean raw frame feature of another video and is flagged as such.
    """
    label.validate(features.n_frames)
    tree = build_tree(features, q, params, cfg)
    hyps = extract_hypotheses(tree, q, params)
    select_positive(hyps, label)
    picks, _scores = top_k(hyps, cfg.K)
    rewards = shape_rewards([reward(h) for h in picks])
    gaps = free_gaps(features.n_frames, [h.span for h in picks])
    negatives: list[NegativeSample] = []
    for _ in picks:
        if gaps:
            negatives.append(
                NegativeSample(span=sample_negative_span(gaps, rng), vector=None, cross_video=False)
            )
        else:
            if fallback_features is None:
                raise InvalidInputError(
                    f"top-K spans cover all of {features.video_id!r} and no fallback "
                    "video was provided for negative sampling"
                )
            vec = fallback_features.data.mean(axis=0)
            negatives.append(NegativeSample(span=None, vector=vec, cross_video=True))
    return ForwardRecord(
        features=features,
        q=np.asarray(q, dtype=np.float64),
        q_wrong=np.asarray(q_wrong, dtype=np.float64),
        label=label,
        cfg=cfg,
        trace=tree.trace,
        dw_coeffs=list(tree.dw_coeffs),
        pick_ids=[h.root_id for h in picks],
        pick_spans=[h.span for h in picks],
        rewards=rewards,
        negatives=negatives,
    )


# --- replay tape ------------------------------------------------------------------

@dataclass
class _Ref:
    """Where a merge input comes from: an earlier tape slot or a constant."""

    tape_idx: int | None
    const: np.ndarray | None


@dataclass
class _MergeTape:
    """The differentiable part of a replayed build.

    Leaf features with frozen down-weight scales are constants; only the
    merge cascade (two matvecs plus bias per node) depends on the
    parameters. Ops are stored in creation order, children as refs.
    """

    ops: list[tuple[_Ref, _Ref]]
    idx_of: dict[int, int]
    final_leaf: np.ndarray
    n_frames: int

    @classmethod
    def compile(cls, record: ForwardRecord) -> "_MergeTape":
        n = record.features.n_frames
        # leaf feature evolution mirrors the build: one in-place scale per
        # down-weight event, in event order, so the bits match exactly
        leafvec = [record.features.data[i].copy() for i in range(n)]
        ops: list[tuple[_Ref, _Ref]] = []
        idx_of: dict[int, int] = {}
        k = 0
        for event in record.trace:
            if isinstance(event, MergeEvent):
                refs = []
                for cid in (event.left_id, event.right_id):
                    if cid < n:
                        refs.append(_Ref(tape_idx=None, const=leafvec[cid].copy()))
                    else:
                        refs.append(_Ref(tape_idx=idx_of[cid], const=None))
                idx_of[event.new_id] = len(ops)
                ops.append((refs[0], refs[1]))
            elif isinstance(event, DownweightEvent):
                leafvec[event.leaf_id] = leafvec[event.leaf_id] * record.dw_coeffs[k]
                k += 1
        return cls(ops=ops, idx_of=idx_of, final_leaf=np.stack(leafvec), n_frames=n)

    def eval(self, params: ModelParams) -> list[np.ndarray]:
        values: list[np.ndarray] = []
        for left, right in self.ops:
            lv = values[left.tape_idx] if left.tape_idx is not None else left.const
            rv = values[right.tape_idx] if right.tape_idx is not None else right.const
            values.append(params.W3 @ lv + params.W3 @ rv + params.b)
        return values

    def root_feature(self, root_id: int, values: list[np.ndarray]) -> np.ndarray:
        if root_id < self.n_frames:
            return self.final_leaf[root_id]
        return values[self.idx_of[root_id]]

    def negative_feature(self, neg: NegativeSample) -> np.ndarray:
        if neg.vector is not None:
            return neg.vector
        s, e = neg.span
        return self.final_leaf[s : e + 1].mean(axis=0)


# --- replayed forward and backward -------------------------------------------------

def _forward_backward(
    record: ForwardRecord, params: ModelParams, need_grad: bool
) -> tuple[LossReport, GradientSet | None]:
    cfg = record.cfg
    w_r, w_e, w_a = cfg.loss_weights
    tape = record.tape()
    values = tape.eval(params)
    d = params.dim
    K = len(record.pick_ids)

    pick_v = [tape.root_feature(rid, values) for rid in record.pick_ids]
    neg_v = [tape.negative_feature(neg) for neg in record.negatives]

    # scoring head
    y = np.array([float(np.dot(params.w_s, v)) + params.b_s for v in pick_v])
    s = np.array([sigmoid(t) for t in y])

    # relevance logits for picks under both queries and for negatives
    c_own = params.W2 @ record.q
    c_wrong = params.W2 @ record.q_wrong
    a_pick = [params.W1 @ v for v in pick_v]
    a_neg = [params.W1 @ v for v in neg_v]
    z_own = np.array([float(np.dot(a, c_own)) for a in a_pick])
    z_wrong = np.array([float(np.dot(a, c_wrong)) for a in a_pick])
    z_neg = np.array([float(np.dot(a, c_own)) for a in a_neg])
    r_own = np.array([sigmoid(z) for z in z_own])
    r_wrong = np.array([sigmoid(z) for z in z_wrong])
    r_neg = np.array([sigmoid(z) for z in z_neg])

    l_rank = rank_loss(list(s), record.rewards)
    l_inter = inter_loss([list(r_own), list(r_wrong)], [1, 0])
    l_intra = intra_loss(list(r_own), list(r_neg), cfg.beta)
    total = w_r * l_rank + w_e * l_inter + w_a * l_intra
    report = LossReport(l_rank, l_inter, l_intra, total, rewards=list(record.rewards))
    if not need_grad:
        return report, None

    grads = GradientSet.zeros(d)
    g_v = [np.zeros(d) for _ in range(K)]

    # rank: dL/ds_j = -R_j + (sum R) * softmax(s)_j, then through the sigmoid head
    rewards = np.asarray(record.rewards)
    shifted = s - np.max(s)
    p = np.exp(shifted)
    p /= p.sum()
    for j in range(K):
        g_s = w_r * (-rewards[j] + rewards.sum() * p[j])
        g_y = g_s * s[j] * (1.0 - s[j])
        grads.w_s += g_y * pick_v[j]
        grads.b_s += g_y
        g_v[j] += g_y * params.w_s

    # inter: clamped terms are flat, others differentiate to (r - y) per logit
    W1T_c_own = params.W1.T @ c_own
    W1T_c_wrong = params.W1.T @ c_wrong
    denom = 2 * K
    for j in range(K):
        if CLIP <= r_own[j] <= 1.0 - CLIP:
            coef = w_e * (r_own[j] - 1.0) / denom
            grads.W1 += coef * np.outer(c_own, pick_v[j])
            grads.W2 += coef * np.outer(a_pick[j], record.q)
            g_v[j] += coef * W1T_c_own
        if CLIP <= r_wrong[j] <= 1.0 - CLIP:
            coef = w_e * (r_wrong[j] - 0.0) / denom
            grads.W1 += coef * np.outer(c_wrong, pick_v[j])
            grads.W2 += coef * np.outer(a_pick[j], record.q_wrong)
            g_v[j] += coef * W1T_c_wrong

    # intra: hinge active when beta - r + r_neg > 0
    for j in range(K):
        if cfg.beta - r_own[j] + r_neg[j] > 0.0:
            g_zp = w_a * (-1.0) * r_own[j] * (1.0 - r_own[j])
            grads.W1 += g_zp * np.outer(c_own, pick_v[j])
            grads.W2 += g_zp * np.outer(a_pick[j], record.q)
            g_v[j] += g_zp * W1T_c_own
            g_zn = w_a * (+1.0) * r_neg[j] * (1.0 - r_neg[j])
            grads.W1 += g_zn * np.outer(c_own, neg_v[j])
            grads.W2 += g_zn * np.outer(a_neg[j], record.q)
            # negative features are frozen constants, nothing flows further

    # merge cascade, reverse order; leaf inputs are constants and absorb nothing
    g_tape = [np.zeros(d) for _ in tape.ops]
    for j, rid in enumerate(record.pick_ids):
        if rid >= tape.n_frames:
            g_tape[tape.idx_of[rid]] += g_v[j]
    for i in range(len(tape.ops) - 1, -1, -1):
        g = g_tape[i]
        if not g.any():
            continue
        left, right = tape.ops[i]
        lv = values[left.tape_idx] if left.tape_idx is not None else left.const
        rv = values[right.tape_idx] if right.tape_idx is not None else right.const
        grads.W3 += np.outer(g, lv + rv)
        grads.b += g
        back = params.W3.T @ g
        if left.tape_idx is not None:
            g_tape[left.tape_idx] += back
        if right.tape_idx is not None:
            g_tape[right.tape_idx] += back
    return report, grads


def replay_losses(record: ForwardRecord, params: ModelParams) -> LossReport:
    """Loss of the recorded video at arbitrary parameters, decisions frozen."""
    report, _ = _forward_backward(record, params, need_grad=False)
    return report


def backward_frozen(
    record: ForwardRecord, params: ModelParams
) -> tuple[LossReport, GradientSet]:
    """Analytic gradients of the replayed total loss for every parameter."""
    report, grads = _forward_backward(record, params, need_grad=True)
    return report, grads


# --- finite differences -----------------------------------------------------------

def _param_entries(params: ModelParams):
    for name in ("W1", "W2", "W3", "b", "w_s"):
        arr = getattr(params, name)
        for idx in np.ndindex(arr.shape):
            yield name, idx
    yield "b_s", None


def finite_diff_check(
    record: ForwardRecord, params: ModelParams, epsilon: float = 1e-4
) -> float:
    """Worst relative gap between analytic and central-difference gradients.

    The error per entry is |an - fd| / max(|an|, |fd|, 1e-3), so entries near
    zero are judged on an absolute scale instead of blowing up the ratio.
    """
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    _, grads = backward_frozen(record, params)
    worst = 0.0
    for name, idx in _param_entries(params):
        probe = params.copy()
        if idx is None:
            probe.b_s = params.b_s + epsilon
            up = replay_losses(record, probe).total
            probe.b_s = params.b_s - epsilon
            down = replay_losses(record, probe).total
            an = grads.b_s
        else:
            arr = getattr(probe, name)
            orig = arr[idx]
            arr[idx] = orig + epsilon
            up = replay_losses(record, probe).total
            arr[idx] = orig - epsilon
            down = replay_losses(record, probe).total
            arr[idx] = orig
            an = getattr(grads, name)[idx]
        fd = (up - down) / (2.0 * epsilon)
        err = abs(an - fd) / max(abs(an), abs(fd), 1e-3)
        worst = max(worst, err)
    return worst


# --- trainer ----------------------------------------------------------------------

def apply_update(params: ModelParams, grads: GradientSet, lr: float) -> ModelParams:
    new = params.copy()
    new.W1 -= lr * grads.W1
    new.W2 -= lr * grads.W2
    new.W3 -= lr * grads.W3
    new.b -= lr * grads.b
    new.w_s -= lr * grads.w_s
    new.b_s = new.b_s - lr * grads.b_s
    return new


def learning_rate_at(cfg: Config, epoch: int) -> float:
    return cfg.learning_rate * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def train(
    dataset: list[VideoInstance],
    params: ModelParams,
    cfg: Config,
    epochs: int,
    log_fn=None,
) -> tuple[ModelParams, list[LossReport]]:
    """Per-video gradient descent with a stepwise decaying learning rate.

    Each video is rebuilt from scratch every epoch (fresh topology under the
    current parameters), recorded, differentiated, and applied immediately.
    The wrong query and the fallback video for cross-video negatives rotate
    deterministically with the epoch.
    """
    if not dataset:
        raise InvalidInputError("training needs at least one video")
    if epochs < 1:
        raise InvalidInputError(f"epochs must be positive, got {epochs}")
    params = params.copy()
    history: list[LossReport] = []
    n = len(dataset)
    for epoch in range(epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        lr = learning_rate_at(cfg, epoch)
        sums = np.zeros(4)
        for i, inst in enumerate(dataset):
            j = (i + 1 + epoch) % n
            if j == i and n > 1:
                j = (i + 1) % n
            other = dataset[j]
            record = record_forward(
                inst.features,
                inst.query.data,
                other.query.data,
                inst.label,
                params,
                cfg,
                rng,
                fallback_features=other.features,
            )
            report, grads = backward_frozen(record, params)
            if not report.is_finite():
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, video {inst.features.video_id!r}: "
                    f"rank={report.rank_loss} inter={report.inter_loss} "
                    f"intra={report.intra_loss}"
                )
            params = apply_update(params, grads, lr)
            sums += (report.rank_loss, report.inter_loss, report.intra_loss, report.total)
        means = sums / n
        epoch_report = LossReport(*means)
        history.append(epoch_report)
        if log_fn is not None:
            log_fn(epoch, epoch_report)
    return params, history
