"""VOC-style detection evaluation: greedy matching, AP and base/novel means."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .datamodel import Box, ClassSplit, Detection, GroundTruth, iou

logger = logging.getLogger(__name__)

INTERPOLATIONS = ("11point", "all")


@dataclass
class MatchResult:
    """TP/FP flags for one (image, class), in descending-score order."""

    scores: list[float]
    tp: list[bool]
    gt_matched: list[bool]

    @property
    def fp(self) -> list[bool]:
        return [not t for t in self.tp]


def _score_order(scores: Sequence[float]) -> list[int]:
    # stable sort: equal scores keep ascending index order
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def match_detections(dets: Sequence[Detection], gts: Sequence[Box], iou_thresh: float = 0.5) -> MatchResult:
    """Greedily match one image's detections of one class to its ground truth.

    Each detection, taken by descending score, claims the unmatched GT box with
    the highest IoU if that IoU reaches ``iou_thresh``.
    """
    order = _score_order([d.score for d in dets])
    matched = [False] * len(gts)
    scores, tp = [], []
    for i in order:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if matched[j]:
                continue
            o = iou(dets[i].box, g)
            if o > best:
                best, best_j = o, j
        hit = best_j >= 0 and best >= iou_thresh
        if hit:
            matched[best_j] = True
        scores.append(dets[i].score)
        tp.append(hit)
    return MatchResult(scores, tp, matched)


def average_precision(
    matches: Sequence[MatchResult] | tuple[Sequence[float], Sequence[bool]],
    n_gt: int,
    interpolation: str = "11point",
) -> float:
    """AP of one class from per-image match results.

    ``matches`` may also be a pre-flattened ``(scores, tp_flags)`` pair. Ties in
    score are resolved by the order detections appear in, image by image.
    """
    if interpolation not in INTERPOLATIONS:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if n_gt <= 0:
        raise ValueError("average_precision needs n_gt >= 1")
    if isinstance(matches, tuple):
        scores, flags = list(matches[0]), list(matches[1])
    else:
        scores = [s for m in matches for s in m.scores]
        flags = [t for m in matches for t in m.tp]
    if not scores:
        return 0.0

    order = _score_order(scores)
    tp = np.array([flags[i] for i in order], dtype=np.float64)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    rec = tp_cum / n_gt
    prec = tp_cum / (tp_cum + fp_cum)

    if interpolation == "11point":
        ps = []
        for i in range(11):
            mask = rec >= i / 10
            ps.append(float(prec[mask].max()) if mask.any() else 0.0)
        return sum(ps) / 11

    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return sum(float((mrec[i + 1] - mrec[i]) * mpre[i + 1]) for i in steps)


@dataclass
class EvalReport:
    per_class_ap: dict[str, float]
    base_mean: float
    novel_mean: float
    overall: float
    iou_threshold: float
    split: ClassSplit = field(repr=False)
    excluded: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "per_class_ap": dict(self.per_class_ap),
            "base_mean": self.base_mean,
            "novel_mean": self.novel_mean,
            "mAP": self.overall,
            "excluded": list(self.excluded),
        }

    def to_text(self, title: str = "") -> str:
        """Per-class AP table, novel classes first then base, as percentages."""
        novel = [c for c in self.split.novel_classes if c in self.per_class_ap]
        base = [c for c in self.split.base_classes if c in self.per_class_ap]
        head = ["method"] + novel + ["novel_mean"] + base + ["base_mean", "mAP"]
        row = [title or "-"]
        row += [f"{100 * self.per_class_ap[c]:.1f}" for c in novel] + [f"{100 * self.novel_mean:.1f}"]
        row += [f"{100 * self.per_class_ap[c]:.1f}" for c in base] + [f"{100 * self.base_mean:.1f}"]
        row += [f"{100 * self.overall:.1f}"]
        widths = [max(len(h), len(r)) for h, r in zip(head, row)]
        fmt = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
        return f"IoU >= {self.iou_threshold}\n{fmt(head)}\n{fmt(row)}\n"

    def to_kv(self, prefix: str = "") -> str:
        lines = [f"{prefix}iou={self.iou_threshold!r}"]
        lines += [f"{prefix}ap.{c}={v!r}" for c, v in self.per_class_ap.items()]
        lines += [
            f"{prefix}novel_mean={self.novel_mean!r}",
            f"{prefix}base_mean={self.base_mean!r}",
            f"{prefix}mAP={self.overall!r}",
        ]
        return "\n".join(lines) + "\n"


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else float("nan")


def mean_ap(per_class_ap: Mapping[str, float], split: ClassSplit, iou_threshold: float = 0.5,
            excluded: Sequence[str] = ()) -> EvalReport:
    """Aggregate per-class APs into base, novel and overall means.

    Classes listed in ``excluded`` (no ground truth) are left out of every mean;
    any other vocabulary class missing from ``per_class_ap`` is an error.
    """
    missing = [c for c in split.vocabulary if c not in per_class_ap and c not in excluded]
    if missing:
        raise KeyError(f"no AP for classes {missing}")
    base = [per_class_ap[c] for c in split.base_classes if c in per_class_ap]
    novel = [per_class_ap[c] for c in split.novel_classes if c in per_class_ap]
    ordered = {c: per_class_ap[c] for c in split.vocabulary if c in per_class_ap}
    return EvalReport(ordered, _mean(base), _mean(novel), _mean(base + novel), iou_threshold, split, tuple(excluded))


def evaluate_detections(
    detections: Mapping[str, Sequence[Detection]],
    ground_truth: Mapping[str, Sequence[GroundTruth]],
    split: ClassSplit,
    iou_thresh: float = 0.5,
    interpolation: str = "11point",
    classes: Sequence[int] | None = None,
) -> EvalReport:
    """Evaluate a whole dataset; keys of both mappings are image ids."""
    classes = list(range(split.num_classes)) if classes is None else list(classes)
    image_ids = sorted(ground_truth)
    per_class: dict[str, float] = {}
    excluded = []
    for c in classes:
        name = split.vocabulary[c]
        results = []
        n_gt = 0
        for image_id in image_ids:
            gts = [g.box for g in ground_truth[image_id] if g.class_id == c]
            dets = [d for d in detections.get(image_id, ()) if d.class_id == c]
            n_gt += len(gts)
            results.append(match_detections(dets, gts, iou_thresh))
        if n_gt == 0:
            logger.warning("class %s has no ground truth; excluded from means", name)
            excluded.append(name)
            continue
        per_class[name] = average_precision(results, n_gt, interpolation)
    scope = [split.vocabulary[c] for c in classes]
    excluded += [c for c in split.vocabulary if c not in scope]
    return mean_ap(per_class, split, iou_thresh, excluded)
