"""Boxes, detections, class splits and annotation ingestion for both domains.

Boxes use the corner convention ``(x1, y1, x2, y2)`` in continuous 0-based
pixel coordinates, with exclusive extent (``width = x2 - x1``). VOC files use
1-based inclusive pixel indices and are converted on the way in and out.
"""

from __future__ import annotations

import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import PurePosixPath
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class IngestionError(ValueError):
    """Raised when an annotation or manifest cannot be ingested."""

    def __init__(self, source: str, field_name: str, message: str):
        self.source = source
        self.field_name = field_name
        super().__init__(f"{source}: field '{field_name}': {message}")


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}: need x1 < x2 and y1 < y2")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in seq)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"class_id {self.class_id} is not a foreground class")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between ``(N, 4)`` and ``(M, 4)`` corner-format arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass(frozen=True)
class ClassSplit:
    base_classes: tuple[str, ...]
    novel_classes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "base_classes", tuple(self.base_classes))
        object.__setattr__(self, "novel_classes", tuple(self.novel_classes))
        overlap = set(self.base_classes) & set(self.novel_classes)
        if overlap:
            raise ValueError(f"classes in both base and novel sets: {sorted(overlap)}")
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ValueError("duplicate class names in split")

    @property
    def vocabulary(self) -> tuple[str, ...]:
        """Full label vocabulary; class ids index into this tuple."""
        return self.base_classes + self.novel_classes

    @property
    def num_classes(self) -> int:
        return len(self.vocabulary)

    @property
    def base_ids(self) -> tuple[int, ...]:
        return tuple(range(len(self.base_classes)))

    @property
    def novel_ids(self) -> tuple[int, ...]:
        n = len(self.base_classes)
        return tuple(range(n, n + len(self.novel_classes)))

    def class_id(self, name: str) -> int:
        return self.vocabulary.index(name)

    def is_base(self, class_id: int) -> bool:
        return 0 <= class_id < len(self.base_classes)


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int


@dataclass(frozen=True)
class TargetImageRecord:
    """A target-domain image with box-level ground truth.

    ``image`` is ``None`` when only the annotation has been read.
    """

    image_id: str
    objects: tuple[GroundTruth, ...]
    image: np.ndarray | None = field(default=None, compare=False, repr=False)
    width: int | None = None
    height: int | None = None

    def with_image(self, image: np.ndarray) -> "TargetImageRecord":
        h, w = image.shape[:2]
        return TargetImageRecord(self.image_id, self.objects, image, w, h)


@dataclass(frozen=True)
class WebImageRecord:
    image_id: str
    path: str
    image_label: int
    image: np.ndarray | None = field(default=None, compare=False, repr=False)

    def with_image(self, image: np.ndarray) -> "WebImageRecord":
        return WebImageRecord(self.image_id, self.path, self.image_label, image)


@dataclass(frozen=True)
class PseudoBox:
    box: Box
    class_id: int
    score: float


@dataclass(frozen=True)
class PseudoAnnotation:
    image_id: str
    image_label: int
    boxes: tuple[PseudoBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        for pb in self.boxes:
            if pb.class_id != self.image_label:
                raise ValueError(
                    f"{self.image_id}: pseudo box labelled {pb.class_id}, image label is {self.image_label}"
                )


# --------------------------------------------------------------------------
# VOC XML


def _xml_text(node: ET.Element, path: str, source: str) -> str:
    child = node.find(path)
    if child is None or child.text is None or not child.text.strip():
        raise IngestionError(source, path, "missing")
    return child.text.strip()


def _xml_float(node: ET.Element, path: str, source: str) -> float:
    text = _xml_text(node, path, source)
    try:
        return float(text)
    except ValueError:
        raise IngestionError(source, path, f"not a number: {text!r}") from None


def parse_voc_annotation(xml_text: str, split: ClassSplit, source: str = "<xml>") -> TargetImageRecord:
    """Parse a VOC-style annotation into a :class:`TargetImageRecord` without pixels.

    Objects flagged ``difficult`` are dropped with a warning.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise IngestionError(source, "<document>", f"malformed XML ({exc})") from None

    filename = root.findtext("filename")
    image_id = PurePosixPath(filename.strip()).stem if filename and filename.strip() else PurePosixPath(source).stem
    width = height = None
    size = root.find("size")
    if size is not None:
        width = int(_xml_float(size, "width", source))
        height = int(_xml_float(size, "height", source))

    objects = []
    for i, obj in enumerate(root.findall("object")):
        name = _xml_text(obj, "name", source)
        if name not in split.vocabulary:
            raise IngestionError(source, f"object[{i}]/name", f"unknown class {name!r}")
        if obj.findtext("difficult", "0").strip() == "1":
            logger.warning("%s: dropping difficult object %d (%s)", source, i, name)
            continue
        bnd = obj.find("bndbox")
        if bnd is None:
            raise IngestionError(source, f"object[{i}]/bndbox", "missing")
        xmin = _xml_float(bnd, "xmin", source)
        ymin = _xml_float(bnd, "ymin", source)
        xmax = _xml_float(bnd, "xmax", source)
        ymax = _xml_float(bnd, "ymax", source)
        try:
            box = Box(xmin - 1.0, ymin - 1.0, xmax, ymax)
        except ValueError as exc:
            raise IngestionError(source, f"object[{i}]/bndbox", str(exc)) from None
        objects.append(GroundTruth(box, split.class_id(name)))
    return TargetImageRecord(image_id, tuple(objects), None, width, height)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def serialize_voc_annotation(record: TargetImageRecord, split: ClassSplit, filename: str | None = None) -> str:
    """Inverse of :func:`parse_voc_annotation` on (class, box) pairs."""
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = filename or f"{record.image_id}.png"
    if record.width is not None and record.height is not None:
        size = ET.SubElement(root, "size")
        ET.SubElement(size, "width").text = str(record.width)
        ET.SubElement(size, "height").text = str(record.height)
        ET.SubElement(size, "depth").text = "3"
    for gt in record.objects:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = split.vocabulary[gt.class_id]
        ET.SubElement(obj, "difficult").text = "0"
        bnd = ET.SubElement(obj, "bndbox")
        ET.SubElement(bnd, "xmin").text = _fmt(gt.box.x1 + 1.0)
        ET.SubElement(bnd, "ymin").text = _fmt(gt.box.y1 + 1.0)
        ET.SubElement(bnd, "xmax").text = _fmt(gt.box.x2)
        ET.SubElement(bnd, "ymax").text = _fmt(gt.box.y2)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


# --------------------------------------------------------------------------
# Web manifests


def load_web_manifest(manifest_text: str, split: ClassSplit, source: str = "<manifest>") -> list[WebImageRecord]:
    """Parse ``relative/path.png<TAB>label`` lines into records, in file order."""
    records = []
    seen: set[str] = set()
    for lineno, line in enumerate(manifest_text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 2:
            raise IngestionError(f"{source}:{lineno}", "line", "expected '<path>\\t<label>'")
        path, label = parts[0].strip(), parts[1].strip()
        if label not in split.vocabulary:
            raise IngestionError(f"{source}:{lineno}", "label", f"unknown class {label!r}")
        image_id = PurePosixPath(path).stem
        if image_id in seen:
            raise IngestionError(f"{source}:{lineno}", "path", f"duplicate image_id {image_id!r}")
        seen.add(image_id)
        records.append(WebImageRecord(image_id, path, split.class_id(label)))
    return records


def dump_web_manifest(records: Iterable[WebImageRecord], split: ClassSplit) -> str:
    return "".join(f"{r.path}\t{split.vocabulary[r.image_label]}\n" for r in records)
