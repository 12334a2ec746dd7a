import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from websod.datamodel import Box, Detection, PseudoAnnotation, PseudoBox, WebImageRecord, pairwise_iou
from websod.detector import LossSpec, TrainConfig, train_detector
from websod.region_estimator import (
    EstimatorConfig,
    dump_pseudo,
    estimate_all,
    estimate_regions,
    load_pseudo,
    pseudo_from_detections,
    pseudo_label_quality,
)

from conftest import small_detector, toy_samples
from oracles import max_matching_exhaustive

VOCAB = ("dog", "cat", "bird")
DOG, CAT, BIRD = 0, 1, 2
A, B, C = Box(0, 0, 10, 10), Box(20, 20, 30, 40), Box(5, 5, 15, 15)


def test_thresholding_and_relabelling_example():
    dets = [Detection(A, DOG, 0.9), Detection(B, CAT, 0.85), Detection(C, DOG, 0.3)]
    ann = pseudo_from_detections("w1", BIRD, dets, 0.8)
    assert ann.boxes == (PseudoBox(A, BIRD, 0.9), PseudoBox(B, BIRD, 0.85))


def test_threshold_one_gives_empty_annotation():
    dets = [Detection(A, DOG, 0.9999), Detection(B, CAT, 0.85)]
    assert pseudo_from_detections("w1", BIRD, dets, 1.0).boxes == ()


def test_cap_keeps_highest_scores():
    dets = [Detection(Box(i, 0, i + 5, 5), DOG, 0.8 + 0.01 * i) for i in range(6)]
    ann = pseudo_from_detections("w", CAT, dets, 0.8, max_boxes=2)
    assert [b.box.x1 for b in ann.boxes] == [5, 4]


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
def test_config_threshold_must_lie_strictly_inside_unit_interval(t):
    with pytest.raises(ValueError):
        EstimatorConfig(score_threshold=t)


@given(st.lists(st.floats(0, 1, allow_nan=False), max_size=12),
       st.lists(st.floats(0.01, 0.99), min_size=2, max_size=6))
@settings(max_examples=100, deadline=None)
def test_count_non_increasing_in_threshold(scores, thresholds):
    dets = [Detection(Box(i, 0, i + 1, 1), i % 3, s) for i, s in enumerate(scores)]
    counts = [len(pseudo_from_detections("w", DOG, dets, t, max_boxes=100).boxes) for t in sorted(thresholds)]
    assert counts == sorted(counts, reverse=True)


@pytest.fixture(scope="module")
def seeded_detector():
    torch.manual_seed(0)
    model = small_detector(seed=0)
    train_detector(toy_samples(16, seed=1), model, LossSpec(), TrainConfig(steps=20, batch_size=4, lr=0.01))
    return model


@pytest.fixture(scope="module")
def web_records():
    return [WebImageRecord(f"w{i}", f"w{i}.png", i % 3).with_image(s.image)
            for i, s in enumerate(toy_samples(6, seed=4))]


def test_seeded_sweep_is_monotone(seeded_detector, web_records):
    counts = []
    for t in (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9):
        anns = estimate_all(web_records, seeded_detector, EstimatorConfig(t))
        for ann, rec in zip(anns, web_records):
            assert all(b.class_id == rec.image_label and b.score >= t for b in ann.boxes)
        counts.append(sum(len(a.boxes) for a in anns))
    assert counts == sorted(counts, reverse=True)
    assert counts[0] > 0


def test_single_record_matches_batch(seeded_detector, web_records):
    cfg = EstimatorConfig(0.1)
    one = estimate_regions(web_records[0], seeded_detector, cfg)
    assert one == estimate_all(web_records[:1], seeded_detector, cfg)[0]


def test_records_without_pixels_rejected(seeded_detector):
    with pytest.raises(ValueError):
        estimate_all([WebImageRecord("x", "x.png", 0)], seeded_detector, EstimatorConfig())


def test_quality_identical_sets():
    gt = {"w": [(A, BIRD), (B, BIRD)]}
    ann = PseudoAnnotation("w", BIRD, (PseudoBox(A, BIRD, 0.9), PseudoBox(B, BIRD, 0.9)))
    q = pseudo_label_quality([ann], gt)
    assert (q.precision, q.recall, q.precision_defined) == (1.0, 1.0, True)


def test_quality_empty_pseudo_set():
    q = pseudo_label_quality([PseudoAnnotation("w", BIRD, ())], {"w": [(A, BIRD)]})
    assert (q.precision, q.recall, q.precision_defined) == (0.0, 0.0, False)


def test_quality_ignores_gt_of_other_classes():
    gt = {"w": [(A, BIRD), (B, DOG)]}
    ann = PseudoAnnotation("w", BIRD, (PseudoBox(A, BIRD, 0.9), PseudoBox(B, BIRD, 0.9)))
    q = pseudo_label_quality([ann], gt)
    assert (q.n_gt, q.n_matched, q.precision) == (1, 1, 0.5)


def test_quality_matching_agrees_with_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, m = rng.integers(0, 5, size=2)
        p = np.hstack([xy := rng.uniform(0, 20, (n, 2)), xy + rng.uniform(4, 10, (n, 2))])
        g = np.hstack([xy := rng.uniform(0, 20, (m, 2)), xy + rng.uniform(4, 10, (m, 2))])
        ann = PseudoAnnotation("w", BIRD, tuple(PseudoBox(Box.from_seq(b), BIRD, 0.9) for b in p))
        q = pseudo_label_quality([ann], {"w": [(Box.from_seq(b), BIRD) for b in g]})
        ok = pairwise_iou(p.reshape(-1, 4), g.reshape(-1, 4)) >= 0.5
        assert q.n_matched == max_matching_exhaustive(ok)


def test_pseudo_jsonl_round_trip():
    anns = [PseudoAnnotation("w1", BIRD, (PseudoBox(A, BIRD, 0.91), PseudoBox(B, BIRD, 0.8))),
            PseudoAnnotation("w2", DOG, ())]
    text = dump_pseudo(anns, VOCAB)
    assert text.count("\n") == 2
    assert load_pseudo(text, VOCAB) == anns
