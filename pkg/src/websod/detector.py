"""A small two-stage detector: conv backbone, RPN, RoIAlign box head.

Class ids inside the network are 1-based (0 is background); the public
:class:`~websod.datamodel.Detection` objects carry 0-based vocabulary ids.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F
from torchvision.ops import roi_align

from . import attention
from .attention import CamBranch
from .datamodel import Box, Detection, pairwise_iou

logger = logging.getLogger(__name__)

BBOX_CLIP = math.log(1000.0 / 16)
# regression targets are scaled by these before the smooth L1
DELTA_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tw, self.th)


@dataclass(frozen=True)
class RoI:
    box: Box
    objectness: float


@dataclass(frozen=True)
class FeatureMap:
    tensor: Tensor
    stride: int


@dataclass
class DetectorConfig:
    num_classes: int
    channels: int = 32
    num_layers: int = 4
    anchor_sizes: tuple[float, ...] = (16.0, 24.0, 32.0, 48.0)
    pre_nms_top_n: int = 150
    top_n: int = 32
    test_top_n: int = 48
    proposal_nms: float = 0.7
    detection_nms: float = 0.3
    max_detections: int = 100
    roi_size: int = 4
    fc_dim: int = 128
    cam_channels: int = 32
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_batch: int = 32
    roi_fg_fraction: float = 0.25
    fg_iou: float = 0.5
    bg_iou: float = 0.3

    @property
    def stride(self) -> int:
        return 2 ** min(3, self.num_layers)


# --------------------------------------------------------------------------
# box parameterisation and losses


def encode_delta(proposal: Box, target: Box) -> BoxDelta:
    """Centre offsets relative to proposal size and log size ratios."""
    pw, ph = proposal.width, proposal.height
    pcx, pcy = proposal.x1 + 0.5 * pw, proposal.y1 + 0.5 * ph
    gw, gh = target.width, target.height
    gcx, gcy = target.x1 + 0.5 * gw, target.y1 + 0.5 * gh
    return BoxDelta((gcx - pcx) / pw, (gcy - pcy) / ph, math.log(gw / pw), math.log(gh / ph))


def decode_delta(proposal: Box, delta: BoxDelta) -> Box:
    pw, ph = proposal.width, proposal.height
    cx = proposal.x1 + 0.5 * pw + delta.tx * pw
    cy = proposal.y1 + 0.5 * ph + delta.ty * ph
    w = pw * math.exp(delta.tw)
    h = ph * math.exp(delta.th)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def encode_deltas(proposals: Tensor, targets: Tensor, weights=DELTA_WEIGHTS) -> Tensor:
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    pcx = proposals[:, 0] + 0.5 * pw
    pcy = proposals[:, 1] + 0.5 * ph
    gw = targets[:, 2] - targets[:, 0]
    gh = targets[:, 3] - targets[:, 1]
    gcx = targets[:, 0] + 0.5 * gw
    gcy = targets[:, 1] + 0.5 * gh
    wx, wy, ww, wh = weights
    return torch.stack(
        [wx * (gcx - pcx) / pw, wy * (gcy - pcy) / ph, ww * torch.log(gw / pw), wh * torch.log(gh / ph)], dim=1
    )


def decode_deltas(proposals: Tensor, deltas: Tensor, weights=DELTA_WEIGHTS) -> Tensor:
    """Vectorised inverse of :func:`encode_deltas`; size offsets are clamped."""
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    pcx = proposals[:, 0] + 0.5 * pw
    pcy = proposals[:, 1] + 0.5 * ph
    wx, wy, ww, wh = weights
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=BBOX_CLIP)
    dh = (deltas[:, 3] / wh).clamp(max=BBOX_CLIP)
    cx, cy = pcx + dx * pw, pcy + dy * ph
    w, h = pw * torch.exp(dw), ph * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise. Works on floats and tensors."""
    if isinstance(x, Tensor):
        ax = x.abs()
        return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)
    ax = abs(x)
    return 0.5 * x * x if ax < 1 else ax - 0.5


LOG_EPS = 1e-12


def cls_log_loss(p, label: int):
    """``-log p[label]`` with the probability clamped at 1e-12."""
    if isinstance(p, Tensor):
        return -torch.log(p[..., label].clamp(min=LOG_EPS))
    return -math.log(max(float(p[label]), LOG_EPS))


def per_roi_log_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Log loss of softmaxed logits per row; ``-log p[label]`` with the same clamp."""
    p = torch.softmax(logits, dim=1).gather(1, labels[:, None].long())[:, 0]
    return -torch.log(p.clamp(min=LOG_EPS))


def clip_boxes(boxes: Tensor, height: int, width: int) -> Tensor:
    x = boxes[:, 0::2].clamp(0, width)
    y = boxes[:, 1::2].clamp(0, height)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy NMS. Equal scores are visited in ascending index order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        overlap = np.where(union > 0, inter / np.where(union > 0, union, 1), 0)
        order = rest[overlap <= iou_thresh]
    return np.asarray(keep, dtype=np.int64)


# --------------------------------------------------------------------------
# network


class Backbone(nn.Module):
    def __init__(self, channels: int = 32, num_layers: int = 4):
        super().__init__()
        layers = []
        in_ch = 3
        for i in range(num_layers):
            out_ch = channels // 2 if i == 0 else channels
            layers.append(nn.Conv2d(in_ch, out_ch, 3, stride=2 if i < 3 else 1, padding=1, padding_mode="replicate"))
            in_ch = out_ch
        self.convs = nn.ModuleList(layers)
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(conv.bias)

    def forward(self, x: Tensor) -> Tensor:
        x = (x - PIXEL_MEAN) / PIXEL_STD
        for conv in self.convs:
            x = F.relu(conv(x))
        return x

    def pre_activation(self, x: Tensor) -> Tensor:
        x = (x - PIXEL_MEAN) / PIXEL_STD
        for conv in self.convs[:-1]:
            x = F.relu(conv(x))
        return self.convs[-1](x)


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, num_anchors, 1)
        self.deltas = nn.Conv2d(channels, 4 * num_anchors, 1)
        for layer in (self.objectness, self.deltas):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, fm: Tensor) -> tuple[Tensor, Tensor]:
        """Objectness ``(B, H*W*A)`` and deltas ``(B, H*W*A, 4)``."""
        h = F.relu(self.conv(fm))
        b = fm.shape[0]
        obj = self.objectness(h).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.deltas(h).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return obj, deltas


class BoxHead(nn.Module):
    def __init__(self, channels: int, roi_size: int, fc_dim: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(channels * roi_size * roi_size, fc_dim)
        self.cls_score = nn.Linear(fc_dim, num_classes + 1)
        self.bbox_pred = nn.Linear(fc_dim, 4 * num_classes)
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.zeros_(self.bbox_pred.bias)

    def forward(self, roi_feats: Tensor) -> tuple[Tensor, Tensor]:
        h = F.relu(self.fc(roi_feats.flatten(1)))
        return self.cls_score(h), self.bbox_pred(h)


class Detector(nn.Module):
    """Backbone + RPN + box head, plus the CAM branch and an optional RoI-feature refiner."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.channels, cfg.num_layers)
        self.rpn = RPNHead(cfg.channels, len(cfg.anchor_sizes))
        self.box_head = BoxHead(cfg.channels, cfg.roi_size, cfg.fc_dim, cfg.num_classes)
        self.cam = CamBranch(cfg.channels, cfg.cam_channels, cfg.num_classes)
        self.refine: nn.Module | None = None
        self._anchor_cache: dict[tuple, Tensor] = {}

    @property
    def stride(self) -> int:
        return self.cfg.stride

    def anchors(self, height: int, width: int, dtype=torch.float32) -> Tensor:
        """Anchors for a feature map, ordered (row, col, size)."""
        key = (height, width, dtype)
        if key not in self._anchor_cache:
            s = self.stride
            ys, xs = torch.meshgrid(
                (torch.arange(height, dtype=torch.float64) + 0.5) * s,
                (torch.arange(width, dtype=torch.float64) + 0.5) * s,
                indexing="ij",
            )
            sizes = torch.tensor(self.cfg.anchor_sizes, dtype=torch.float64)
            cx = xs[:, :, None].expand(-1, -1, len(sizes))
            cy = ys[:, :, None].expand(-1, -1, len(sizes))
            half = (sizes / 2)[None, None, :]
            a = torch.stack([cx - half, cy - half, cx + half, cy + half], dim=-1).reshape(-1, 4)
            self._anchor_cache[key] = a.to(dtype)
        return self._anchor_cache[key]

    def roi_features(self, fm: Tensor, rois: Sequence[Tensor]) -> Tensor:
        feats = roi_align(
            fm, [r.to(fm.dtype) for r in rois], output_size=self.cfg.roi_size,
            spatial_scale=1.0 / self.stride, sampling_ratio=2, aligned=True,
        )
        if self.refine is not None:
            feats = self.refine(feats)
        return feats


def build_detector(cfg: DetectorConfig, seed: int) -> Detector:
    torch.manual_seed(seed)
    return Detector(cfg)


def extract_features(image, model: Detector) -> FeatureMap:
    """Backbone features of one ``(H, W, 3)`` image (array or tensor) in [0, 1]."""
    x = _as_batch(image, next(model.parameters()).dtype)
    if x.shape[2] < model.stride or x.shape[3] < model.stride:
        raise ValueError(f"image {tuple(x.shape[2:])} smaller than stride {model.stride}")
    with torch.no_grad():
        return FeatureMap(model.backbone(x)[0], model.stride)


def _as_batch(images, dtype=torch.float32) -> Tensor:
    """HWC image(s) in [0, 1] -> BCHW tensor, rejecting non-finite values."""
    if isinstance(images, (list, tuple)):
        x = torch.stack([torch.as_tensor(np.asarray(im)) for im in images])
    else:
        x = torch.as_tensor(np.asarray(images))
        if x.dim() == 3:
            x = x[None]
    if not torch.isfinite(x).all():
        raise ValueError("image contains non-finite values")
    return x.permute(0, 3, 1, 2).to(dtype).contiguous()


# --------------------------------------------------------------------------
# proposals and inference


def _proposals_single(model: Detector, obj: Tensor, deltas: Tensor, anchors: Tensor, height: int, width: int,
                      top_n: int) -> tuple[Tensor, Tensor]:
    cfg = model.cfg
    boxes = clip_boxes(decode_deltas(anchors, deltas), height, width)
    valid = ((boxes[:, 2] - boxes[:, 0]) >= 1) & ((boxes[:, 3] - boxes[:, 1]) >= 1)
    idx = torch.nonzero(valid).flatten().numpy()
    scores = obj.numpy()[idx]
    order = idx[np.argsort(-scores, kind="stable")][: cfg.pre_nms_top_n]
    b = boxes[torch.from_numpy(order)]
    s = obj[torch.from_numpy(order)]
    keep = nms(b.numpy(), s.numpy(), cfg.proposal_nms)[:top_n]
    keep_t = torch.from_numpy(keep)
    return b[keep_t], s[keep_t]


def proposals_from_features(model: Detector, fm: Tensor, image_size: tuple[int, int],
                            top_n: int) -> list[tuple[Tensor, Tensor]]:
    """Per-image ``(boxes, objectness_logits)`` for a batch of feature maps."""
    with torch.no_grad():
        obj, deltas = model.rpn(fm)
        anchors = model.anchors(fm.shape[2], fm.shape[3], fm.dtype)
        h, w = image_size
        return [_proposals_single(model, obj[i], deltas[i], anchors, h, w, top_n) for i in range(fm.shape[0])]


def generate_proposals(fm: FeatureMap | Tensor, model: Detector, image_size: tuple[int, int] | None = None,
                       top_n: int | None = None) -> list[RoI]:
    """Top-N RoIs of one image after objectness sorting, clipping and NMS."""
    t = fm.tensor if isinstance(fm, FeatureMap) else fm
    if t.dim() == 3:
        t = t[None]
    if image_size is None:
        image_size = (t.shape[2] * model.stride, t.shape[3] * model.stride)
    boxes, scores = proposals_from_features(model, t, image_size, top_n or model.cfg.top_n)[0]
    probs = torch.sigmoid(scores)
    return [RoI(Box.from_seq(b.tolist()), float(p)) for b, p in zip(boxes, probs)]


def postprocess_detections(boxes: np.ndarray, scores: np.ndarray, score_threshold: float,
                           nms_iou: float = 0.3, max_detections: int = 100) -> list[Detection]:
    """Per-class NMS then thresholding.

    ``boxes`` is ``(N, C, 4)`` and ``scores`` ``(N, C)`` for N RoIs and C
    foreground classes. Output is sorted by descending score with ties broken
    by class and coordinates, so it does not depend on the RoI order.
    """
    out = []
    for c in range(scores.shape[1]):
        b, s = boxes[:, c], scores[:, c]
        # canonical candidate order makes NMS independent of RoI order
        order = np.lexsort((b[:, 3], b[:, 2], b[:, 1], b[:, 0], -s))
        b, s = b[order], s[order]
        for i in nms(b, s, nms_iou):
            if s[i] >= score_threshold:
                x1, y1, x2, y2 = (float(v) for v in b[i])
                if x2 > x1 and y2 > y1:
                    out.append(Detection(Box(x1, y1, x2, y2), c, float(min(max(s[i], 0.0), 1.0))))
    out.sort(key=lambda d: (-d.score, d.class_id, d.box.as_tuple()))
    return out[:max_detections]


def detect_batch(images, model: Detector, score_threshold: float) -> list[list[Detection]]:
    """Detections for a batch of same-sized HWC images."""
    cfg = model.cfg
    was_training = model.training
    model.eval()
    with torch.no_grad():
        x = _as_batch(images, next(model.parameters()).dtype)
        h, w = x.shape[2], x.shape[3]
        fm = model.backbone(x)
        props = proposals_from_features(model, fm, (h, w), cfg.test_top_n)
        rois = [p[0] for p in props]
        counts = [r.shape[0] for r in rois]
        results: list[list[Detection]] = [[] for _ in counts]
        if sum(counts):
            logits, deltas = model.box_head(model.roi_features(fm, rois))
            probs = torch.softmax(logits, dim=1)[:, 1:]
            all_rois = torch.cat(rois)
            n, c = probs.shape
            boxes = decode_deltas(all_rois.repeat_interleave(c, dim=0), deltas.reshape(-1, 4))
            boxes = clip_boxes(boxes, h, w).reshape(n, c, 4)
            start = 0
            for i, k in enumerate(counts):
                if k:
                    results[i] = postprocess_detections(
                        boxes[start:start + k].double().numpy(), probs[start:start + k].double().numpy(),
                        score_threshold, cfg.detection_nms, cfg.max_detections,
                    )
                start += k
    model.train(was_training)
    return results


def detect(image, model: Detector, score_threshold: float = 0.05) -> list[Detection]:
    return detect_batch([image], model, score_threshold)[0]


def detect_all(images: Sequence[np.ndarray], model: Detector, score_threshold: float,
               batch_size: int = 32) -> list[list[Detection]]:
    out: list[list[Detection]] = []
    for i in range(0, len(images), batch_size):
        out.extend(detect_batch(list(images[i:i + batch_size]), model, score_threshold))
    return out


# --------------------------------------------------------------------------
# training


@dataclass
class TrainSample:
    """One training image. ``boxes`` may be empty (image-label supervision only)."""

    image: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray
    image_label: int | None = None


@dataclass
class LossSpec:
    acl: bool = False
    image_cls: bool = False
    rpn: bool = True
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    softmax_axis: str = "spatial"
    attention_pool: str = "max"
    delta: float = attention.DELTA


@dataclass
class TrainConfig:
    steps: int = 300
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    lr_decay_at: float = 0.8
    seed: int = 0


@dataclass
class TrainResult:
    model: Detector
    history: list[dict[str, float]] = field(default_factory=list)


def _sample_indices(flags: Tensor, count: int, gen: torch.Generator) -> Tensor:
    idx = torch.nonzero(flags).flatten()
    if idx.numel() > count:
        idx = idx[torch.randperm(idx.numel(), generator=gen)[:count]]
    return idx


def _rpn_targets(model: Detector, anchors: Tensor, gt: Tensor, gen: torch.Generator):
    cfg = model.cfg
    labels = torch.full((anchors.shape[0],), -1, dtype=torch.long)
    if gt.shape[0] == 0:
        return labels, torch.zeros_like(anchors)
    ious = torch.from_numpy(pairwise_iou(anchors.numpy(), gt.numpy())).to(anchors.dtype)
    best, matched = ious.max(dim=1)
    labels[best < cfg.rpn_neg_iou] = 0
    labels[best >= cfg.rpn_pos_iou] = 1
    gt_best = ious.max(dim=0).values
    for j in range(gt.shape[0]):
        if gt_best[j] > 0:
            hits = torch.nonzero(ious[:, j] == gt_best[j]).flatten()
            labels[hits] = 1
            matched[hits] = j
    n_pos = int(cfg.rpn_batch * cfg.rpn_pos_fraction)
    pos = _sample_indices(labels == 1, n_pos, gen)
    neg = _sample_indices(labels == 0, cfg.rpn_batch - pos.numel(), gen)
    sampled = torch.full_like(labels, -1)
    sampled[neg] = 0
    sampled[pos] = 1
    return sampled, gt[matched]


def _roi_targets(model: Detector, props: Tensor, gt: Tensor, gt_labels: Tensor, gen: torch.Generator):
    """Sample RoIs; returns (rois, labels 1-based/0=bg, matched gt boxes)."""
    cfg = model.cfg
    rois = torch.cat([props, gt.to(props.dtype)]) if gt.shape[0] else props
    if gt.shape[0] == 0:
        neg = _sample_indices(torch.ones(rois.shape[0], dtype=torch.bool), cfg.roi_batch, gen)
        return rois[neg], torch.zeros(neg.numel(), dtype=torch.long), rois[neg]
    ious = torch.from_numpy(pairwise_iou(rois.numpy(), gt.numpy()))
    best, matched = ious.max(dim=1)
    fg = best >= cfg.fg_iou
    bg = best < cfg.bg_iou
    pos = _sample_indices(fg, int(cfg.roi_batch * cfg.roi_fg_fraction), gen)
    neg = _sample_indices(bg, cfg.roi_batch - pos.numel(), gen)
    keep = torch.cat([pos, neg])
    labels = torch.cat([gt_labels[matched[pos]].long() + 1, torch.zeros(neg.numel(), dtype=torch.long)])
    return rois[keep], labels, gt[matched[keep]].to(props.dtype)


def detector_losses(model: Detector, batch: Sequence[TrainSample], spec: LossSpec,
                    gen: torch.Generator) -> tuple[Tensor, dict[str, float]]:
    """Total training loss of one mini-batch and its components."""
    dtype = next(model.parameters()).dtype
    x = _as_batch([s.image for s in batch], dtype)
    h, w = x.shape[2], x.shape[3]
    fm = model.backbone(x)
    zero = fm.new_zeros(())
    parts: dict[str, Tensor] = {}

    boxed = [i for i, s in enumerate(batch) if len(s.boxes)]
    gts = [torch.as_tensor(np.asarray(s.boxes, dtype=np.float64).reshape(-1, 4)).to(dtype) for s in batch]
    gt_labels = [torch.as_tensor(np.asarray(s.labels, dtype=np.int64).reshape(-1)) for s in batch]

    cam_f = None
    if spec.image_cls or spec.acl:
        img_logits, cam_f = attention.cam_forward(fm, model.cam)
        labelled = [i for i, s in enumerate(batch) if s.image_label is not None]
        if spec.image_cls and labelled:
            targets = torch.tensor([batch[i].image_label for i in labelled])
            parts["icls"] = attention.image_cls_loss(img_logits[labelled], targets)

    if spec.rpn and boxed:
        obj, deltas = model.rpn(fm)
        anchors = model.anchors(fm.shape[2], fm.shape[3], dtype)
        obj_losses, reg_losses, n_sampled = [], [], 0
        for i in boxed:
            labels, matched = _rpn_targets(model, anchors, gts[i], gen)
            sampled = labels >= 0
            n_sampled += int(sampled.sum())
            obj_losses.append(F.binary_cross_entropy_with_logits(
                obj[i][sampled], labels[sampled].to(dtype), reduction="sum"))
            pos = labels == 1
            if pos.any():
                t = encode_deltas(anchors[pos], matched[pos])
                reg_losses.append(smooth_l1(deltas[i][pos] - t).sum())
        parts["rpn_cls"] = torch.stack(obj_losses).sum() / max(n_sampled, 1)
        parts["rpn_reg"] = (torch.stack(reg_losses).sum() if reg_losses else zero) / max(n_sampled, 1)

    if boxed:
        props = proposals_from_features(model, fm[boxed].detach(), (h, w), model.cfg.top_n)
        rois, labels, matched, owners = [], [], [], []
        for k, i in enumerate(boxed):
            r, lab, m = _roi_targets(model, props[k][0], gts[i], gt_labels[i], gen)
            rois.append(r)
            labels.append(lab)
            matched.append(m)
            owners.append(i)
        roi_feats = model.roi_features(fm[boxed], rois)
        logits, box_deltas = model.box_head(roi_feats)
        all_labels = torch.cat(labels)
        cls_losses = per_roi_log_loss(logits, all_labels)

        if spec.acl:
            weights = torch.cat([
                attention.roi_attention_weights(
                    cam_f[i], model.cam.classifier.weight, r, lab, model.stride,
                    spec.softmax_axis, spec.attention_pool, spec.delta, batch[i].image_label)
                for i, r, lab in zip(owners, rois, labels)
            ])
        else:
            weights = torch.ones_like(cls_losses)
        parts["acl"] = attention.acl(cls_losses, weights)

        fg = all_labels > 0
        reg = fm.new_zeros(all_labels.shape[0])
        if fg.any():
            all_rois = torch.cat(rois)
            per_class = box_deltas.reshape(box_deltas.shape[0], -1, 4)
            pred = per_class[torch.nonzero(fg).flatten(), all_labels[fg] - 1]
            target = encode_deltas(all_rois[fg], torch.cat(matched)[fg])
            reg = reg.index_put((torch.nonzero(fg).flatten(),), smooth_l1(pred - target).sum(dim=1))
        parts["reg_per_roi"] = reg

    acl_value = parts.pop("acl", zero)
    reg_per_roi = parts.pop("reg_per_roi", zero)
    icls_value = parts.pop("icls", zero)
    total, summary = attention.total_loss(acl_value, reg_per_roi, icls_value,
                                          spec.lambda1, spec.lambda2, spec.lambda3)
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise FloatingPointError(f"non-finite loss component '{name}': {value}")
        total = total + value
        summary[name] = float(value.detach())
    summary["total"] = float(total.detach())
    return total, summary


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + step)


def batch_order(n: int, batch_size: int, seed: int) -> Iterator[list[int]]:
    """Endless seeded stream of mini-batches drawn epoch by epoch."""
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield [int(j) for j in perm[i:i + batch_size]]


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def set_lr(opt: torch.optim.Optimizer, cfg: TrainConfig, step: int) -> None:
    lr = cfg.lr * (0.1 if step >= int(cfg.lr_decay_at * cfg.steps) else 1.0)
    for g in opt.param_groups:
        g["lr"] = lr


def run_steps(
    streams: Sequence[tuple[str, Sequence[TrainSample], LossSpec]],
    model: Detector,
    params: Sequence[nn.Parameter],
    cfg: TrainConfig,
    on_step: Callable[[int], None] | None = None,
) -> list[dict[str, float]]:
    """SGD over one or more data streams, visited in strict round-robin order."""
    orders = [batch_order(len(data), cfg.batch_size, cfg.seed + 7919 * k) for k, (_, data, _) in enumerate(streams)]
    opt = make_optimizer(params, cfg)
    history = []
    model.train()
    for step in range(cfg.steps):
        k = step % len(streams)
        name, data, spec = streams[k]
        batch = [data[i] for i in next(orders[k])]
        set_lr(opt, cfg, step)
        opt.zero_grad(set_to_none=True)
        try:
            loss, parts = detector_losses(model, batch, spec, step_generator(cfg.seed, step))
        except FloatingPointError as exc:
            raise TrainingError(f"step {step} ({name}): {exc}") from None
        if not math.isfinite(parts["total"]):
            raise TrainingError(f"step {step} ({name}): non-finite total loss {parts['total']}")
        if loss.requires_grad:
            loss.backward()
            opt.step()
        history.append({"step": step, "stream": name, **parts})
        if on_step is not None:
            on_step(step)
    return history


def train_detector(dataset: Sequence[TrainSample], model: Detector, loss_spec: LossSpec,
                   cfg: TrainConfig) -> TrainResult:
    """Train every parameter of ``model`` in place on one dataset."""
    if not dataset:
        raise ValueError("train_detector needs a non-empty dataset")
    params = [p for p in model.parameters() if p.requires_grad]
    history = run_steps([("train", dataset, loss_spec)], model, params, cfg)
    if history:
        logger.info("trained %d steps, loss %.4f -> %.4f", len(history), history[0]["total"], history[-1]["total"])
    return TrainResult(model, history)


def warmup_cam(dataset: Sequence[TrainSample], model: Detector, cfg: TrainConfig) -> list[dict[str, float]]:
    """Train only the CAM branch on image labels, leaving the detector untouched.

    A freshly initialised CAM head gives meaningless attention weights, and
    its early gradients are large next to those of an already trained
    detector, so it is fitted on its own before joint training.
    """
    labelled = [TrainSample(s.image, np.zeros((0, 4)), np.zeros(0, dtype=np.int64), s.image_label)
                for s in dataset if s.image_label is not None]
    if not labelled or cfg.steps <= 0:
        return []
    spec = LossSpec(acl=False, image_cls=True, rpn=False)
    return run_steps([("cam_warmup", labelled, spec)], model, list(model.cam.parameters()), cfg)

