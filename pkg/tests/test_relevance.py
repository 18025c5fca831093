import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from segloc.core import Config, DimensionError, ModelParams, init_params, new_rng
from segloc.relevance import (
    linguistic_relevance,
    linguistic_relevance_projected,
    merge_score,
    node_prune_relevance,
    sigmoid,
    visual_relevance,
)


def zero_params(d: int) -> ModelParams:
    p = init_params(d, new_rng(0))
    p.W1 = np.zeros((d, d))
    p.W2 = np.zeros((d, d))
    return p


def scalar_loop_relevance(v, q, params) -> float:
    """Independent recomputation with explicit loops, no numpy reductions."""
    d = len(v)
    a = [sum(params.W1[i][j] * v[j] for j in range(d)) for i in range(d)]
    c = [sum(params.W2[i][j] * q[j] for j in range(d)) for i in range(d)]
    z = sum(x * y for x, y in zip(a, c))
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1 + math.exp(z))


class TestSigmoid:
    def test_zero(self):
        assert sigmoid(0.0) == 0.5

    def test_extremes_saturate_without_overflow(self):
        assert sigmoid(1000.0) == 1.0
        assert sigmoid(-1000.0) == 0.0

    @given(st.floats(min_value=-30, max_value=30))
    def test_range_and_symmetry(self, z):
        # strictly inside (0,1) until float64 saturation near |z| ~ 37
        s = sigmoid(z)
        assert 0.0 < s < 1.0
        assert math.isclose(s + sigmoid(-z), 1.0, abs_tol=1e-12)


class TestLinguisticRelevance:
    def test_zero_weights_give_half(self):
        p = zero_params(4)
        assert linguistic_relevance(np.ones(4), np.ones(4), p) == 0.5

    def test_identity_weights_closed_form(self):
        d = 4
        p = zero_params(d)
        p.W1 = np.eye(d)
        p.W2 = np.eye(d)
        e0 = np.zeros(d)
        e0[0] = 1.0
        r = linguistic_relevance(e0, e0, p)
        assert math.isclose(r, 1 / (1 + math.exp(-1)), abs_tol=1e-15)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            d = 8
            v, q = rng.standard_normal(d), rng.standard_normal(d)
            p = init_params(d, rng)
            assert math.isclose(
                linguistic_relevance(v, q, p), scalar_loop_relevance(v, q, p),
                abs_tol=1e-12,
            )

    def test_projected_variant_bitwise_equal(self):
        rng = np.random.default_rng(4)
        d = 6
        v, q = rng.standard_normal(d), rng.standard_normal(d)
        p = init_params(d, rng)
        assert linguistic_relevance(v, q, p) == linguistic_relevance_projected(
            v, p.W2 @ q, p
        )

    def test_dim_mismatch(self):
        p = init_params(4, new_rng(0))
        with pytest.raises(DimensionError):
            linguistic_relevance(np.ones(5), np.ones(4), p)

    def test_monotone_in_projected_product(self):
        # scaling v along the positive-product direction never decreases r
        rng = np.random.default_rng(5)
        d = 5
        p = init_params(d, rng)
        q = rng.standard_normal(d)
        v = rng.standard_normal(d)
        r1 = linguistic_relevance(v, q, p)
        z = np.dot(p.W1 @ v, p.W2 @ q)
        r2 = linguistic_relevance(v * 2.0, q, p)
        if z > 0:
            assert r2 >= r1
        elif z < 0:
            assert r2 <= r1


class TestVisualRelevance:
    def test_identical(self):
        v = np.array([1.0, 2.0, 3.0])
        assert visual_relevance(v, v) == 1.0

    def test_orthogonal(self):
        assert visual_relevance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_opposite(self):
        v = np.array([1.0, -2.0])
        assert math.isclose(visual_relevance(v, -v), -1.0, abs_tol=1e-12)

    def test_degenerate_norm_is_zero(self):
        assert visual_relevance(np.zeros(3), np.ones(3)) == 0.0

    @given(st.integers(min_value=0, max_value=10_000))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        s = visual_relevance(a, b)
        assert s == visual_relevance(b, a)
        assert -1.0 <= s <= 1.0

    @given(
        st.integers(min_value=0, max_value=10_000),
        st.floats(min_value=1e-3, max_value=1e3),
    )
    def test_scale_invariant(self, seed, c):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        assert math.isclose(
            visual_relevance(c * a, b), visual_relevance(a, b), abs_tol=1e-12
        )


class TestMergeScore:
    def test_identical_nodes_maximal(self):
        d = 4
        p = init_params(d, new_rng(0))
        cfg = Config()
        v = np.ones(d)
        q = np.ones(d)
        assert math.isclose(merge_score(v, v, q, p, cfg), 2.0, abs_tol=1e-12)

    def test_zero_weights_orthogonal(self):
        p = zero_params(2)
        cfg = Config()
        s = merge_score(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.ones(2), p, cfg)
        assert math.isclose(s, 1.0, abs_tol=1e-15)

    def test_compositional(self):
        rng = np.random.default_rng(9)
        d = 6
        p = init_params(d, rng)
        cfg = Config(lambda1=0.7, lambda2=1.3)
        vi, vj, q = rng.standard_normal(d), rng.standard_normal(d), rng.standard_normal(d)
        ri = linguistic_relevance(vi, q, p)
        rj = linguistic_relevance(vj, q, p)
        expect = 0.7 * (1 - abs(ri - rj)) + 1.3 * visual_relevance(vi, vj)
        assert math.isclose(merge_score(vi, vj, q, p, cfg), expect, abs_tol=1e-12)

    def test_self_pair_dominates(self):
        rng = np.random.default_rng(11)
        d = 4
        p = init_params(d, rng)
        cfg = Config()
        q = rng.standard_normal(d)
        v = rng.standard_normal(d)
        for _ in range(20):
            u = rng.standard_normal(d)
            assert merge_score(v, v, q, p, cfg) >= merge_score(v, u, q, p, cfg)


class TestNodePruneRelevance:
    def test_delegates(self):
        rng = np.random.default_rng(13)
        d = 5
        p = init_params(d, rng)
        for _ in range(100):
            v, q = rng.standard_normal(d), rng.standard_normal(d)
            assert node_prune_relevance(v, q, p) == linguistic_relevance(v, q, p)

    def test_aligned_large_norm_high(self):
        d = 4
        p = zero_params(d)
        p.W1 = np.eye(d)
        p.W2 = np.eye(d)
        q = np.zeros(d)
        q[0] = 1.0
        assert node_prune_relevance(q * 10.0, q, p) > 0.9
