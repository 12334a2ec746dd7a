import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from websod.datamodel import Box, ClassSplit, Detection, GroundTruth
from websod.evaluation import average_precision, evaluate_detections, match_detections, mean_ap

from oracles import ap_11point_staircase, ap_all_point_staircase, ap_battery, greedy_match

SPLIT = ClassSplit(("a", "b"), ("n",))


def test_perfect_detector_scores_one():
    assert average_precision(([0.9, 0.8], [True, True]), 2) == 1.0
    assert average_precision(([0.9, 0.8], [True, True]), 2, "all") == 1.0


def test_no_detections_scores_zero():
    assert average_precision(([], []), 3) == 0.0


def test_known_11point_value():
    # TP, FP, TP with two GT: precision 1 up to recall .5, then 2/3 up to 1
    ap = average_precision(([0.9, 0.8, 0.7], [True, False, True]), 2)
    assert ap == pytest.approx((6 * 1.0 + 5 * (2 / 3)) / 11)


def test_ap_requires_ground_truth():
    with pytest.raises(ValueError):
        average_precision(([0.5], [True]), 0)
    with pytest.raises(ValueError):
        average_precision(([0.5], [True]), 1, "cubic")


def test_ap_equals_staircase_on_exhaustive_battery():
    n = 0
    for scores, flags, n_gt in ap_battery():
        assert average_precision((scores, flags), n_gt) == ap_11point_staircase(scores, flags, n_gt)
        assert abs(average_precision((scores, flags), n_gt, "all")
                   - ap_all_point_staircase(scores, flags, n_gt)) < 1e-12
        n += 1
    assert n == 14808


def test_tied_scores_follow_input_order():
    # same scores, the FP listed first lowers precision at the first cut
    first_fp = average_precision(([0.5, 0.5], [False, True]), 1)
    first_tp = average_precision(([0.5, 0.5], [True, False]), 1)
    assert first_tp == 1.0 and first_fp == 0.5


def det(x1, y1, x2, y2, score, cls=0):
    return Detection(Box(x1, y1, x2, y2), cls, score)


def test_match_prefers_highest_iou_unmatched_gt():
    gts = [Box(0, 0, 10, 10), Box(2, 0, 12, 10)]
    m = match_detections([det(2, 0, 12, 10, 0.9), det(1, 0, 11, 10, 0.8)], gts)
    assert m.tp == [True, True]
    assert m.gt_matched == [True, True]


def test_duplicate_detection_is_false_positive():
    m = match_detections([det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.8)], [Box(0, 0, 10, 10)])
    assert m.tp == [True, False]


def test_match_threshold_is_inclusive():
    # IoU exactly 0.5
    m = match_detections([det(0, 0, 10, 10, 0.9)], [Box(0, 0, 10, 5)])
    assert m.tp == [True]
    m = match_detections([det(0, 0, 10, 10, 0.9)], [Box(0, 0, 10, 5)], iou_thresh=0.7)
    assert m.tp == [False]


box_st = st.tuples(st.integers(0, 10), st.integers(0, 10), st.integers(1, 8), st.integers(1, 8)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(st.lists(st.tuples(box_st, st.sampled_from([0.3, 0.6, 0.9])), max_size=5),
       st.lists(box_st, max_size=3), st.sampled_from([0.5, 0.7]))
@settings(max_examples=300, deadline=None)
def test_matching_agrees_with_reference(dets, gts, thresh):
    m = match_detections([det(*b, s) for b, s in dets], [Box(*g) for g in gts], thresh)
    assert m.tp == greedy_match([b for b, _ in dets], [s for _, s in dets], gts, thresh)
    assert sum(m.tp) == sum(m.gt_matched) <= len(gts)


@given(st.lists(st.tuples(st.floats(0.01, 1.0), st.booleans()), max_size=12), st.integers(1, 6))
@settings(max_examples=200, deadline=None)
def test_ap_bounds_and_monotone_in_extra_fp(pairs, n_gt):
    pairs = [p for p in pairs][: n_gt + 6]
    flags = [f for _, f in pairs]
    if sum(flags) > n_gt:
        return
    scores = [s for s, _ in pairs]
    ap = average_precision((scores, flags), n_gt)
    assert 0.0 <= ap <= 1.0
    # a false positive below every score cannot change 11-point AP
    worse = average_precision((scores + [0.0], flags + [False]), n_gt)
    assert worse == ap


def test_evaluate_detections_means_and_exclusion(caplog):
    gt = {
        "i1": [GroundTruth(Box(0, 0, 10, 10), 0), GroundTruth(Box(20, 20, 30, 30), 2)],
        "i2": [GroundTruth(Box(5, 5, 15, 15), 0)],
    }
    dets = {
        "i1": [det(0, 0, 10, 10, 0.9, 0), det(20, 20, 30, 30, 0.4, 2), det(40, 40, 50, 50, 0.8, 1)],
        "i2": [det(30, 30, 40, 40, 0.7, 0)],
    }
    with caplog.at_level(logging.WARNING):
        rep = evaluate_detections(dets, gt, SPLIT)
    assert rep.excluded == ("b",)
    assert "no ground truth" in caplog.text
    assert rep.per_class_ap["n"] == 1.0
    assert rep.per_class_ap["a"] == pytest.approx((6 * 1.0 + 5 * 0.0) / 11)
    assert rep.base_mean == rep.per_class_ap["a"]
    assert rep.novel_mean == 1.0
    assert rep.overall == pytest.approx((rep.per_class_ap["a"] + 1.0) / 2)


def test_iou_07_is_stricter():
    gt = {"i": [GroundTruth(Box(0, 0, 10, 10), 0)]}
    dets = {"i": [det(0, 0, 10, 6, 0.9, 0)]}
    assert evaluate_detections(dets, gt, SPLIT, 0.5, classes=[0]).per_class_ap["a"] == 1.0
    assert evaluate_detections(dets, gt, SPLIT, 0.7, classes=[0]).per_class_ap["a"] == 0.0


def test_mean_ap_requires_every_class():
    with pytest.raises(KeyError):
        mean_ap({"a": 0.5}, SPLIT)
    rep = mean_ap({"a": 0.5, "b": 0.25, "n": 1.0}, SPLIT)
    assert rep.base_mean == 0.375 and rep.overall == pytest.approx(1.75 / 3)


def test_report_serialisations():
    rep = mean_ap({"a": 0.5, "b": 0.25, "n": 1.0}, SPLIT, 0.7)
    assert rep.to_dict()["mAP"] == rep.overall
    kv = dict(line.split("=", 1) for line in rep.to_kv("x.").splitlines())
    assert float(kv["x.ap.b"]) == 0.25 and float(kv["x.iou"]) == 0.7
    text = rep.to_text("run")
    assert text.startswith("IoU >= 0.7") and "novel_mean" in text and "100.0" in text
