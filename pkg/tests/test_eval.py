import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import spans_in, video_instances
from segloc.core import Config, FrameFeatures, InvalidInputError, OracleLimitError, init_params
from segloc.evaluate import (
    EvalResult,
    evaluate_predictions,
    format_report,
    oracle_build,
    recall_at,
    temporal_iou,
    trees_equal_topology,
    trees_feature_gap,
)
from segloc.tree import build_tree, trace_to_text


class TestTemporalIou:
    def test_identical(self):
        assert temporal_iou((2, 5), (2, 5)) == 1.0

    def test_disjoint(self):
        assert temporal_iou((0, 1), (3, 4)) == 0.0

    def test_partial_overlap(self):
        assert abs(temporal_iou((0, 3), (2, 5)) - 2.0 / 6.0) <= 1e-15

    def test_touching_edges_share_one_frame(self):
        # inclusive spans: (0,2) and (2,4) overlap exactly at frame 2
        assert abs(temporal_iou((0, 2), (2, 4)) - 1.0 / 5.0) <= 1e-15

    def test_containment(self):
        assert abs(temporal_iou((1, 2), (0, 3)) - 2.0 / 4.0) <= 1e-15

    def test_malformed(self):
        with pytest.raises(InvalidInputError):
            temporal_iou((3, 1), (0, 1))

    @given(spans_in(31), spans_in(31))
    def test_symmetric_and_bounded(self, a, b):
        v = temporal_iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == temporal_iou(b, a)

    @given(spans_in(31))
    def test_self_is_one(self, a):
        assert temporal_iou(a, a) == 1.0


class TestRecallAt:
    def test_exact_predictions(self):
        preds = {"a": [(0, 3)], "b": [(5, 9)]}
        gts = {"a": (0, 3), "b": (5, 9)}
        for n in (1, 5):
            for m in (0.3, 0.5, 0.7, 1.0):
                assert recall_at(preds, gts, n, m) == 1.0

    def test_all_disjoint(self):
        preds = {"a": [(0, 1)], "b": [(0, 1)]}
        gts = {"a": (5, 9), "b": (5, 9)}
        assert recall_at(preds, gts, 1, 0.3) == 0.0

    def test_hit_at_rank_two(self):
        preds = {
            "a": [(20, 29), (0, 4)],
            "b": [(20, 29), (25, 29)],
        }
        gts = {"a": (0, 4), "b": (0, 4)}
        assert recall_at(preds, gts, 1, 0.5) == 0.0
        assert recall_at(preds, gts, 2, 0.5) == 0.5

    def test_missing_gt_skipped_with_warning(self, caplog):
        preds = {"a": [(0, 3)], "ghost": [(0, 3)]}
        gts = {"a": (0, 3)}
        with caplog.at_level(logging.WARNING, logger="segloc.evaluate"):
            val = recall_at(preds, gts, 1, 0.5)
        assert val == 1.0
        assert any("ghost" in rec.getMessage() for rec in caplog.records)

    def test_no_covered_videos(self):
        with pytest.raises(InvalidInputError):
            recall_at({"a": [(0, 1)]}, {}, 1, 0.5)

    def test_empty_prediction_list(self):
        with pytest.raises(InvalidInputError):
            recall_at({"a": []}, {"a": (0, 1)}, 1, 0.5)

    def test_bad_rank_and_threshold(self):
        preds, gts = {"a": [(0, 1)]}, {"a": (0, 1)}
        with pytest.raises(InvalidInputError):
            recall_at(preds, gts, 0, 0.5)
        with pytest.raises(InvalidInputError):
            recall_at(preds, gts, 1, 0.0)
        with pytest.raises(InvalidInputError):
            recall_at(preds, gts, 1, 1.5)

    @given(st.integers(0, 500))
    def test_monotone_in_rank_and_threshold(self, seed):
        rng = np.random.default_rng(seed)
        preds = {}
        gts = {}
        for v in range(6):
            spans = []
            for _ in range(4):
                s = int(rng.integers(0, 20))
                e = int(rng.integers(s, 20))
                spans.append((s, e))
            preds[f"v{v}"] = spans
            s = int(rng.integers(0, 20))
            gts[f"v{v}"] = (s, int(rng.integers(s, 20)))
        for m in (0.3, 0.5, 0.7):
            r = [recall_at(preds, gts, n, m) for n in (1, 2, 3, 4)]
            assert r == sorted(r)
        for n in (1, 4):
            r = [recall_at(preds, gts, n, m) for m in (0.3, 0.5, 0.7)]
            assert r == sorted(r, reverse=True)


class TestEvaluatePredictions:
    def test_grid_and_coverage(self):
        preds = {"a": [(0, 3)], "b": [(9, 9)], "ghost": [(0, 0)]}
        gts = {"a": (0, 3), "b": (0, 3)}
        result = evaluate_predictions(preds, gts)
        assert result.covered == 2
        assert result.total == 3
        assert result.grid[(1, 0.5)] == 0.5
        assert dict(result.per_video)["a"] == 1.0

    def test_format_report_golden(self):
        result = EvalResult(
            grid={
                (1, 0.3): 1.0,
                (1, 0.5): 0.5,
                (1, 0.7): 0.25,
                (5, 0.3): 1.0,
                (5, 0.5): 1.0,
                (5, 0.7): 0.5,
            }
        )
        expected = "n\\m 0.3 0.5 0.7\n1 1.0000 0.5000 0.2500\n5 1.0000 1.0000 0.5000\n"
        assert format_report(result) == expected


class TestOracleBuild:
    def test_frame_guard(self):
        d = 4
        feats = FrameFeatures("big", np.ones((13, d)))
        p = init_params(d, np.random.default_rng(0))
        with pytest.raises(OracleLimitError):
            oracle_build(feats, np.ones(d), p, Config())

    def test_single_frame(self):
        d = 4
        feats = FrameFeatures("one", np.ones((1, d)))
        p = init_params(d, np.random.default_rng(0))
        tree = oracle_build(feats, np.ones(d), p, Config())
        fast = build_tree(feats, np.ones(d), p, Config())
        assert trees_equal_topology(tree, fast)
        assert trees_feature_gap(tree, fast) == 0.0

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_fast_builder(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        d = int(rng.integers(4, 17))
        feats = FrameFeatures(f"s{seed}", rng.standard_normal((n, d)))
        q = rng.standard_normal(d)
        p = init_params(d, rng)
        slow = oracle_build(feats, q, p, Config())
        fast = build_tree(feats, q, p, Config())
        assert trees_equal_topology(slow, fast), (
            f"seed {seed}:\n{trace_to_text(slow.trace)}\nvs\n{trace_to_text(fast.trace)}"
        )
        assert trees_feature_gap(slow, fast) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(video_instances())
def test_oracle_equivalence_property(inst):
    feats, q, params = inst
    slow = oracle_build(feats, q, params, Config())
    fast = build_tree(feats, q, params, Config())
    assert trees_equal_topology(slow, fast)
    assert trees_feature_gap(slow, fast) <= 1e-9
