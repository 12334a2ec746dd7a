"""Webly supervised object detection at desk scale.

A base-class detector harvests pseudo boxes from web images, a web detector
is trained on them with an attention-weighted classification loss, and a
residual refinement block adapts RoI features back to the target domain.
"""

from .datamodel import Box, ClassSplit, Detection, IngestionError, iou
from .evaluation import EvalReport, average_precision, match_detections, mean_ap

__all__ = [
    "Box",
    "ClassSplit",
    "Detection",
    "EvalReport",
    "IngestionError",
    "average_precision",
    "iou",
    "match_detections",
    "mean_ap",
]

__version__ = "0.1.0"
