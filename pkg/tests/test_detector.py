import copy
import dataclasses
import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from websod.checkpoint import state_digest
from websod.config import load_config
from websod.datamodel import Box
from websod.detector import (
    LossSpec,
    TrainConfig,
    TrainingError,
    batch_order,
    build_detector,
    cls_log_loss,
    decode_delta,
    decode_deltas,
    detect,
    detect_batch,
    detector_losses,
    encode_delta,
    encode_deltas,
    extract_features,
    generate_proposals,
    nms,
    per_roi_log_loss,
    postprocess_detections,
    smooth_l1,
    step_generator,
    train_detector,
)
from websod.pipeline import benchmark_spec, detector_config, load_target_dir, read_split, target_samples, train_config
from websod.synth import generate_synthetic_benchmark

from conftest import small_detector, toy_samples
from oracles import central_difference, relative_error

ROOT = Path(__file__).resolve().parent.parent


def boxes(lo=0.0, hi=100.0):
    coord = st.floats(lo, hi, allow_nan=False)
    size = st.floats(1.0, 60.0, allow_nan=False)
    return st.tuples(coord, coord, size, size).map(lambda v: Box(v[0], v[1], v[0] + v[2], v[1] + v[3]))


@given(boxes(), boxes())
@settings(max_examples=200, deadline=None)
def test_decode_inverts_encode(p, t):
    back = decode_delta(p, encode_delta(p, t))
    assert np.allclose(back.as_tuple(), t.as_tuple(), atol=1e-6)


def test_vectorised_encode_decode_round_trip():
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 50, (40, 2))
    wh = rng.uniform(2, 30, (40, 2))
    props = torch.tensor(np.hstack([xy, xy + wh]))
    xy2 = xy + rng.normal(0, 3, xy.shape)
    targets = torch.tensor(np.hstack([xy2, xy2 + wh * rng.uniform(0.5, 2, wh.shape)]))
    back = decode_deltas(props, encode_deltas(props, targets))
    assert torch.allclose(back, targets, atol=1e-6)
    scalar = encode_delta(Box.from_seq(props[3].tolist()), Box.from_seq(targets[3].tolist()))
    vec = encode_deltas(props[3:4], targets[3:4], weights=(1, 1, 1, 1))[0]
    assert np.allclose(vec.numpy(), scalar.as_tuple(), atol=1e-12)


def test_smooth_l1_values_and_smoothness_at_one():
    assert smooth_l1(0.5) == 0.125
    assert smooth_l1(-3.0) == 2.5
    eps = 1e-7
    assert smooth_l1(1 - eps) == pytest.approx(smooth_l1(1 + eps), abs=1e-6)
    x = torch.tensor([1 - eps, 1 + eps, -1 - eps, -1 + eps], dtype=torch.float64, requires_grad=True)
    smooth_l1(x).sum().backward()
    assert torch.allclose(x.grad, torch.tensor([1.0, 1.0, -1.0, -1.0], dtype=torch.float64), atol=1e-6)


def test_smooth_l1_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    x0 = rng.uniform(-3, 3, 30)
    x0 = x0[np.abs(np.abs(x0) - 1) > 1e-2]
    x = torch.tensor(x0, requires_grad=True)
    smooth_l1(x).sum().backward()
    num = central_difference(lambda a: float(smooth_l1(torch.tensor(a)).sum()), x0.copy())
    assert relative_error(x.grad.numpy(), num) < 1e-3


def test_cls_log_loss_examples():
    assert cls_log_loss([0.5, 0.5], 1) == pytest.approx(math.log(2))
    assert cls_log_loss([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))


def test_per_roi_log_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    logits0 = rng.normal(size=(5, 4))
    labels = torch.tensor([0, 3, 1, 2, 3])
    logits = torch.tensor(logits0, requires_grad=True)
    per_roi_log_loss(logits, labels).sum().backward()
    num = central_difference(lambda a: float(per_roi_log_loss(torch.tensor(a), labels).sum()), logits0.copy())
    assert relative_error(logits.grad.numpy(), num) < 1e-4


@pytest.mark.parametrize("spec, name", [
    (LossSpec(acl=True, image_cls=True), "box_head.cls_score.bias"),
    (LossSpec(acl=True, image_cls=True), "box_head.bbox_pred.bias"),
    (LossSpec(acl=True, image_cls=True), "box_head.fc.bias"),
    # attention reads the CAM weights under stop-gradient, so they are checked without ACL
    (LossSpec(acl=False, image_cls=True), "cam.classifier.weight"),
])
def test_detector_loss_gradient_matches_finite_differences(spec, name):
    model = small_detector(num_classes=3, seed=4, channels=4, fc_dim=16, cam_channels=4).double()
    batch = toy_samples(2, 3, seed=5, image_label=True)
    param = dict(model.named_parameters())[name]

    def loss_at(value):
        old = param.data.clone()
        param.data.copy_(torch.from_numpy(value))
        with torch.no_grad():
            out = float(detector_losses(model, batch, spec, step_generator(0, 0))[0])
        param.data.copy_(old)
        return out

    detector_losses(model, batch, spec, step_generator(0, 0))[0].backward()
    num = central_difference(loss_at, param.detach().numpy().copy())
    assert relative_error(param.grad.numpy(), num) < 1e-3


def test_nms_removes_duplicates_and_breaks_ties_by_index():
    b = np.array([[0, 0, 10, 10], [0, 0, 10, 10], [20, 20, 30, 30], [1, 0, 11, 10]], dtype=float)
    assert nms(b, np.array([0.9, 0.9, 0.5, 0.95]), 0.7).tolist() == [3, 2]
    assert nms(b[:3], np.array([0.5, 0.5, 0.5]), 0.7).tolist() == [0, 2]
    assert nms(np.zeros((0, 4)), np.zeros(0), 0.7).tolist() == []


def test_equal_objectness_gives_index_ordered_proposals():
    model = small_detector(seed=1)
    for layer in (model.rpn.objectness, model.rpn.deltas):
        torch.nn.init.zeros_(layer.weight)
        torch.nn.init.zeros_(layer.bias)
    fm = extract_features(np.full((64, 64, 3), 0.5, dtype=np.float32), model)
    rois = generate_proposals(fm, model, top_n=10)
    assert len(rois) <= 10
    anchors = model.anchors(8, 8).clamp(0, 64)
    kept = nms(anchors.numpy(), np.zeros(len(anchors)), model.cfg.proposal_nms)[:10]
    assert [r.box.as_tuple() for r in rois] == [tuple(map(float, anchors[i])) for i in kept]


def test_proposal_count_bounded():
    model = small_detector(seed=2)
    fm = extract_features(toy_samples(1)[0].image, model)
    for n in (1, 5, 40):
        assert len(generate_proposals(fm, model, top_n=n)) <= n


def test_postprocess_invariant_to_roi_order():
    rng = np.random.default_rng(3)
    xy = rng.uniform(0, 40, (12, 3, 2))
    b = np.concatenate([xy, xy + rng.uniform(4, 20, (12, 3, 2))], axis=2)
    s = rng.choice([0.2, 0.6, 0.9], size=(12, 3))
    ref = postprocess_detections(b, s, 0.1)
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(12)
        assert postprocess_detections(b[perm], s[perm], 0.1) == ref


@pytest.fixture(scope="module")
def trained_small():
    torch.manual_seed(0)
    model = small_detector(seed=0)
    train_detector(toy_samples(16, seed=1), model, LossSpec(), TrainConfig(steps=30, batch_size=4, lr=0.01))
    return model


def test_detect_threshold_above_one_is_empty(trained_small):
    img = toy_samples(1, seed=9)[0].image
    assert detect(img, trained_small, 1.0 + 1e-9) == []


def test_lowering_threshold_never_removes_detections(trained_small):
    img = toy_samples(1, seed=9)[0].image
    prev = set()
    for t in (0.9, 0.5, 0.2, 0.05, 0.01, 0.0):
        cur = set(detect(img, trained_small, t))
        assert prev <= cur
        prev = cur
    assert prev


def test_detect_batch_matches_single_images(trained_small):
    imgs = [s.image for s in toy_samples(3, seed=11)]
    # batching changes float32 reduction order, so agreement is approximate
    for batched, img in zip(detect_batch(imgs, trained_small, 0.05), imgs):
        single = detect(img, trained_small, 0.05)
        assert [d.class_id for d in batched] == [d.class_id for d in single]
        for a, b in zip(batched, single):
            assert np.allclose(a.box.as_tuple(), b.box.as_tuple(), atol=1e-3)
            assert a.score == pytest.approx(b.score, abs=1e-5)


def test_detect_rejects_non_finite_pixels(trained_small):
    img = toy_samples(1)[0].image.copy()
    img[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        detect(img, trained_small)


def test_first_logged_loss_is_loss_of_initial_parameters():
    data = toy_samples(8, seed=2)
    model = small_detector(seed=3)
    cfg = TrainConfig(steps=3, batch_size=4, seed=5)
    probe = copy.deepcopy(model)
    first = [data[i] for i in next(batch_order(len(data), 4, cfg.seed))]
    with torch.no_grad():
        probe.train()
        direct = float(detector_losses(probe, first, LossSpec(), step_generator(cfg.seed, 0))[0])
    hist = train_detector(data, model, LossSpec(), cfg).history
    assert hist[0]["total"] == direct


def test_zero_learning_rate_leaves_parameters_unchanged():
    model = small_detector(seed=3)
    before = state_digest(model)
    train_detector(toy_samples(8), model, LossSpec(), TrainConfig(steps=3, batch_size=4, lr=0.0))
    assert state_digest(model) == before


def test_training_is_deterministic():
    digests = []
    for _ in range(2):
        model = small_detector(seed=7)
        train_detector(toy_samples(8, seed=1, image_label=True), model, LossSpec(acl=True, image_cls=True),
                       TrainConfig(steps=4, batch_size=4, seed=3))
        digests.append(state_digest(model))
    assert digests[0] == digests[1]


def test_non_finite_loss_aborts_naming_the_step():
    model = small_detector(seed=3)
    with torch.no_grad():
        model.box_head.cls_score.bias.fill_(float("inf"))
    with pytest.raises(TrainingError, match="step 0"):
        train_detector(toy_samples(4), model, LossSpec(), TrainConfig(steps=2, batch_size=4))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_detector([], small_detector(), LossSpec(), TrainConfig())


def test_seeded_200_step_run_halves_the_loss(tmp_path):
    # on the committed desk config the last-10 mean ends at about 36% of step 0
    cfg = load_config(ROOT / "configs" / "desk.ini")
    for key, n in [("n_target_train", 120), ("n_target_test", 1), ("n_target_full", 1), ("n_web_per_class", 1)]:
        cfg.set(f"benchmark.{key}", n)
    generate_synthetic_benchmark(benchmark_spec(cfg), tmp_path, force=True)
    split = read_split(tmp_path)
    data = target_samples(load_target_dir(tmp_path / "target_train", split))
    model = build_detector(detector_config(cfg, split.num_classes), cfg.seed)
    tc = dataclasses.replace(train_config(cfg.base_train, cfg.seed), steps=200)
    hist = train_detector(data, model, LossSpec(), tc).history
    tail = float(np.mean([h["total"] for h in hist[-10:]]))
    assert tail <= 0.5 * hist[0]["total"]
