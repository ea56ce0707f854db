import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from cinet.metrics import FIELDS, DepthAccumulator, SegAccumulator, build_report, depth_metrics, seg_metrics


def test_perfect_depth():
    gt = np.array([1.0, 2.0, 7.5])
    m = depth_metrics(gt, gt, np.ones(3, bool))
    assert m["delta1"] == m["delta2"] == m["delta3"] == 1
    assert m["rms"] == m["rms_log"] == m["abs_rel"] == m["sq_rel"] == 0


def test_depth_worked_examples():
    mask = np.ones(2, bool)
    m = depth_metrics(np.array([1.2, 2.6]), np.array([1.0, 2.0]), mask)
    assert (m["delta1"], m["delta2"]) == (0.5, 1.0)
    m = depth_metrics(np.array([2.0, 4.0]), np.array([1.0, 2.0]), mask)
    assert m["rms"] == pytest.approx(math.sqrt(2.5), abs=1e-15)
    assert m["rms_log"] == pytest.approx(math.log(2), abs=1e-15)
    assert m["abs_rel"] == 1.0 and m["sq_rel"] == 1.0


def test_invalid_pixels_are_ignored():
    gt = np.array([1.0, 0.0, 2.0])
    m = depth_metrics(np.array([1.0, 50.0, 2.0]), gt, gt > 0)
    assert m["rms"] == 0 and m["n_valid"] == 2


def test_non_positive_predictions_rejected():
    with pytest.raises(ValueError):
        depth_metrics(np.array([0.0]), np.array([1.0]), np.ones(1, bool))


def test_seg_worked_examples():
    assert seg_metrics(np.array([0, 1, 1]), np.array([0, 1, 1]), 2) == (1.0, 1.0)
    p_acc, miou = seg_metrics(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2)
    assert p_acc == 0.75 and miou == pytest.approx((0.5 + 2 / 3) / 2, abs=1e-15)
    assert round(miou, 4) == 0.5833
    assert seg_metrics(np.zeros(4, int), np.array([0, 0, 1, 1]), 2) == (0.5, 0.25)


def test_absent_classes_do_not_count_toward_miou():
    _, miou = seg_metrics(np.array([0, 0, 2]), np.array([0, 0, 1]), 4)
    assert miou == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 60))
def test_depth_metrics_match_scalar_oracle(seed, n):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 10, n)
    pred = gt * rng.uniform(0.6, 1.6, n)
    mask = rng.random(n) > 0.1
    mask[0] = True
    got, want = depth_metrics(pred, gt, mask), oracles.depth_metrics(pred, gt, mask)
    for k, v in want.items():
        assert abs(got[k] - v) < 1e-12, k


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 8), st.integers(1, 80))
def test_seg_metrics_match_confusion_oracle(seed, c, n):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, c, n), rng.integers(0, c, n)
    got, want = seg_metrics(pred, gt, c), oracles.seg_metrics(pred, gt, c)
    assert abs(got[0] - want[0]) < 1e-12 and abs(got[1] - want[1]) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 20))
def test_scale_consistency(seed, k):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 10, 30)
    pred = gt * rng.uniform(0.5, 2, 30)
    mask = np.ones(30, bool)
    a, b = depth_metrics(pred, gt, mask), depth_metrics(pred * k, gt * k, mask)
    for name in ("delta1", "delta2", "delta3", "abs_rel", "sq_rel", "rms_log"):
        assert b[name] == pytest.approx(a[name], abs=1e-12)
    assert b["rms"] == pytest.approx(a["rms"] * k, rel=1e-12)
    assert a["delta1"] <= a["delta2"] <= a["delta3"]


def test_accumulators_merge_like_a_single_pass():
    rng = np.random.default_rng(1)
    gt = rng.uniform(0.5, 10, (2, 50))
    pred = gt * rng.uniform(0.7, 1.4, (2, 50))
    whole = DepthAccumulator().update(pred, gt).result()
    merged = DepthAccumulator().update(pred[0], gt[0]).merge(DepthAccumulator().update(pred[1], gt[1])).result()
    for k in whole:
        assert merged[k] == pytest.approx(whole[k], rel=1e-13)
    labels = rng.integers(0, 3, (2, 50))
    seg_whole = SegAccumulator(3).update(labels[::-1], labels)
    seg_merged = SegAccumulator(3).update(labels[1], labels[0]).merge(SegAccumulator(3).update(labels[0], labels[1]))
    assert np.array_equal(seg_whole.confusion, seg_merged.confusion)


def test_report_has_all_nine_fields():
    d = DepthAccumulator().update(np.array([1.0, 2.0]), np.array([1.0, 2.5]))
    s = SegAccumulator(2).update(np.array([0, 1]), np.array([0, 1]))
    report = build_report(d, s).to_dict()
    assert set(FIELDS) <= set(report) and report["n_valid"] == 2
