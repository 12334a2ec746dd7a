"""Pseudo boxes for web images from a base-class detector.

The base detector's detections are thresholded, stripped of their predicted
class and relabelled with the web image's label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .datamodel import Box, Detection, PseudoAnnotation, PseudoBox, WebImageRecord, pairwise_iou
from .detector import Detector, detect_all


@dataclass(frozen=True)
class EstimatorConfig:
    score_threshold: float = 0.8
    max_boxes_per_image: int = 20

    def __post_init__(self):
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError(f"score_threshold must lie in (0, 1), got {self.score_threshold}")
        if self.max_boxes_per_image < 1:
            raise ValueError("max_boxes_per_image must be positive")


def pseudo_from_detections(image_id: str, image_label: int, dets: Sequence[Detection],
                           score_threshold: float, max_boxes: int = 20) -> PseudoAnnotation:
    """Keep detections scoring at least ``score_threshold`` and relabel them."""
    kept = [d for d in dets if d.score >= score_threshold]
    kept.sort(key=lambda d: -d.score)
    boxes = tuple(PseudoBox(d.box, image_label, d.score) for d in kept[:max_boxes])
    return PseudoAnnotation(image_id, image_label, boxes)


def estimate_regions(web_record: WebImageRecord, base_params: Detector, cfg: EstimatorConfig) -> PseudoAnnotation:
    return estimate_all([web_record], base_params, cfg)[0]


def estimate_all(records: Sequence[WebImageRecord], base_params: Detector, cfg: EstimatorConfig,
                 batch_size: int = 32) -> list[PseudoAnnotation]:
    if any(r.image is None for r in records):
        raise ValueError("web records must carry pixels for region estimation")
    # detections at or above the threshold do not depend on the threshold (NMS runs first)
    dets = detect_all([r.image for r in records], base_params, cfg.score_threshold, batch_size)
    return [
        pseudo_from_detections(r.image_id, r.image_label, d, cfg.score_threshold, cfg.max_boxes_per_image)
        for r, d in zip(records, dets)
    ]


@dataclass(frozen=True)
class PseudoLabelQuality:
    precision: float
    recall: float
    n_pseudo: int
    n_gt: int
    n_matched: int
    precision_defined: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _max_matching(pseudo: np.ndarray, gt: np.ndarray, iou_thresh: float) -> int:
    if len(pseudo) == 0 or len(gt) == 0:
        return 0
    ok = pairwise_iou(pseudo, gt) >= iou_thresh
    rows, cols = linear_sum_assignment(-ok.astype(np.float64))
    return int(ok[rows, cols].sum())


def pseudo_label_quality(pseudo: Iterable[PseudoAnnotation], gt: dict[str, Sequence[tuple[Box, int]]],
                         iou_thresh: float = 0.5) -> PseudoLabelQuality:
    """Precision and recall of pseudo boxes against hidden web ground truth.

    Per image, pseudo boxes and ground-truth boxes of the image label are paired
    one-to-one (maximum matching at ``iou_thresh``). Precision divides matches by
    the number of pseudo boxes, recall by the number of labelled-class GT boxes.
    """
    n_pseudo = n_gt = n_matched = 0
    for ann in pseudo:
        p = np.array([b.box.as_tuple() for b in ann.boxes]).reshape(-1, 4)
        g = np.array([b.as_tuple() for b, c in gt.get(ann.image_id, ()) if c == ann.image_label]).reshape(-1, 4)
        n_pseudo += len(p)
        n_gt += len(g)
        n_matched += _max_matching(p, g, iou_thresh)
    defined = n_pseudo > 0
    return PseudoLabelQuality(
        precision=n_matched / n_pseudo if defined else 0.0,
        recall=n_matched / n_gt if n_gt else 0.0,
        n_pseudo=n_pseudo,
        n_gt=n_gt,
        n_matched=n_matched,
        precision_defined=defined,
    )


def dump_pseudo(annotations: Iterable[PseudoAnnotation], vocabulary: Sequence[str]) -> str:
    """One JSON object per line: image_id, label and ``[x1, y1, x2, y2, label, score]`` boxes."""
    lines = []
    for a in annotations:
        boxes = [[*b.box.as_tuple(), vocabulary[b.class_id], b.score] for b in a.boxes]
        lines.append(json.dumps({"image_id": a.image_id, "label": vocabulary[a.image_label], "boxes": boxes}))
    return "".join(line + "\n" for line in lines)


def load_pseudo(text: str, vocabulary: Sequence[str]) -> list[PseudoAnnotation]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        label = vocabulary.index(rec["label"])
        boxes = tuple(
            PseudoBox(Box(float(x1), float(y1), float(x2), float(y2)), vocabulary.index(name), float(score))
            for x1, y1, x2, y2, name, score in rec["boxes"]
        )
        out.append(PseudoAnnotation(rec["image_id"], label, boxes))
    return out
