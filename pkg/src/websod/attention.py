"""CAM branch and the attentive classification loss.

The image-level branch sits on the shared backbone features: one conv layer,
global average pooling and a linear classifier. Its class activation map for
the image label is softmaxed over space, max-pooled inside each RoI, and the
resulting scores (rescaled by the per-image maximum) weight the per-RoI
classification loss of the detector.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import Tensor, nn
from torch.nn import functional as F

DELTA = 1e-8


class CamBranch(nn.Module):
    """CAM conv -> ReLU -> global average pool -> linear image classifier."""

    def __init__(self, in_channels: int, cam_channels: int, num_classes: int):
        super().__init__()
        self.cam_conv = nn.Conv2d(in_channels, cam_channels, 3, padding=1)
        self.classifier = nn.Linear(cam_channels, num_classes)

    def forward(self, fm: Tensor) -> tuple[Tensor, Tensor]:
        return cam_forward(fm, self)


def cam_forward(fm: Tensor, branch: CamBranch) -> tuple[Tensor, Tensor]:
    """Return ``(image_logits, f)`` where ``f`` are the post-conv feature maps.

    ``fm`` is ``(B, K, H, W)`` or a single ``(K, H, W)`` map.
    """
    squeeze = fm.dim() == 3
    if squeeze:
        fm = fm.unsqueeze(0)
    if fm.dim() != 4 or fm.shape[1] != branch.cam_conv.in_channels:
        raise ValueError(
            f"feature map of shape {tuple(fm.shape)} does not match CAM conv with "
            f"{branch.cam_conv.in_channels} input channels"
        )
    f = F.relu(branch.cam_conv(fm))
    logits = branch.classifier(f.mean(dim=(2, 3)))
    if squeeze:
        return logits[0], f[0]
    return logits, f


def image_cls_loss(logits: Tensor, image_label: Tensor | int) -> Tensor:
    """Cross entropy of softmaxed image logits against the image label.

    Accepts a single ``(C,)`` logit vector or a ``(B, C)`` batch (mean over B).
    """
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    label = torch.as_tensor(image_label, device=logits.device).reshape(-1)
    return F.cross_entropy(logits, label)


def compute_cam(f: Tensor, w: Tensor, c: int | Tensor | None = None) -> Tensor:
    """Class activation map ``M_c(x, y) = sum_k w[c, k] * f[k, x, y]``.

    ``f`` is ``(K, H, W)``, ``w`` is ``(C, K)``. With ``c=None`` all classes are
    returned as ``(C, H, W)``; an int gives one ``(H, W)`` map and a tensor of
    indices gives ``(N, H, W)``.
    """
    if f.dim() != 3 or w.dim() != 2 or w.shape[1] != f.shape[0]:
        raise ValueError(f"shape mismatch: f {tuple(f.shape)}, w {tuple(w.shape)}")
    num_classes = w.shape[0]
    if c is None:
        return torch.einsum("ck,khw->chw", w, f)
    idx = torch.as_tensor(c, device=w.device)
    if ((idx < 0) | (idx >= num_classes)).any():
        raise IndexError(f"class index {c} out of range for {num_classes} classes")
    return torch.einsum("...k,khw->...hw", w[idx], f)


def class_softmax(M: Tensor, axis: str = "spatial") -> Tensor:
    """Normalise a ``(C, H, W)`` map.

    ``axis="spatial"`` takes a softmax over positions separately for every
    class; ``axis="class"`` takes it over classes at each position.
    """
    if axis == "spatial":
        flat = M.reshape(M.shape[0], -1)
        return torch.softmax(flat, dim=1).reshape(M.shape)
    if axis == "class":
        return torch.softmax(M, dim=0)
    raise ValueError(f"unknown softmax axis {axis!r}")


def roi_cell_ranges(rois: Tensor, stride: float, height: int, width: int) -> Tensor:
    """Inclusive feature-cell ranges ``(x_lo, y_lo, x_hi, y_hi)`` covered by each box.

    A box covering no cell after clipping snaps to the cell nearest its centre.
    """
    x_lo = torch.floor(rois[:, 0] / stride)
    y_lo = torch.floor(rois[:, 1] / stride)
    x_hi = torch.ceil(rois[:, 2] / stride) - 1
    y_hi = torch.ceil(rois[:, 3] / stride) - 1
    x_lo, x_hi = x_lo.clamp(0, width - 1), x_hi.clamp(0, width - 1)
    y_lo, y_hi = y_lo.clamp(0, height - 1), y_hi.clamp(0, height - 1)
    cx = torch.floor((rois[:, 0] + rois[:, 2]) / 2 / stride).clamp(0, width - 1)
    cy = torch.floor((rois[:, 1] + rois[:, 3]) / 2 / stride).clamp(0, height - 1)
    empty_x = x_lo > x_hi
    empty_y = y_lo > y_hi
    x_lo = torch.where(empty_x, cx, x_lo)
    x_hi = torch.where(empty_x, cx, x_hi)
    y_lo = torch.where(empty_y, cy, y_lo)
    y_hi = torch.where(empty_y, cy, y_hi)
    return torch.stack([x_lo, y_lo, x_hi, y_hi], dim=1).long()


def roi_attention_pool(M: Tensor, rois: Tensor, roi_labels: Tensor, stride: float,
                       mode: str = "max") -> Tensor:
    """1x1 RoI pooling of the normalised CAM of each RoI's label.

    ``M`` is ``(C, H, W)``, ``rois`` is ``(N, 4)`` in image coordinates.
    """
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    n = rois.shape[0]
    if n == 0:
        return M.new_zeros(0)
    _, h, w = M.shape
    ranges = roi_cell_ranges(rois, stride, h, w)
    xs = torch.arange(w, device=M.device)
    ys = torch.arange(h, device=M.device)
    in_x = (xs[None, :] >= ranges[:, 0:1]) & (xs[None, :] <= ranges[:, 2:3])
    in_y = (ys[None, :] >= ranges[:, 1:2]) & (ys[None, :] <= ranges[:, 3:4])
    mask = in_y[:, :, None] & in_x[:, None, :]
    maps = M[roi_labels.long()]
    if mode == "max":
        return maps.masked_fill(~mask, -math.inf).amax(dim=(1, 2))
    return (maps * mask).sum(dim=(1, 2)) / mask.sum(dim=(1, 2))


def normalize_attention(W: Tensor | Sequence[float], delta: float = DELTA) -> Tensor:
    """Divide every raw RoI score by (max score + delta)."""
    W = torch.as_tensor(W)
    if W.numel() == 0:
        raise ValueError("normalize_attention needs at least one RoI score")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if (W < 0).any():
        raise ValueError("attention scores must be non-negative")
    return W / (W.max() + delta)


def acl(cls_losses: Tensor, weights: Tensor) -> Tensor:
    """Attentive classification loss: mean of attention-weighted per-RoI losses."""
    if cls_losses.shape != weights.shape:
        raise ValueError(f"length mismatch: {tuple(cls_losses.shape)} losses vs {tuple(weights.shape)} weights")
    if cls_losses.numel() == 0:
        raise ValueError("acl needs at least one RoI")
    return (weights * cls_losses).sum() / cls_losses.numel()


def total_loss(acl_value, reg_losses, icls_value, lambda1: float = 1.0, lambda2: float = 1.0,
               lambda3: float = 1.0) -> tuple[Tensor, dict[str, float]]:
    """Weighted detector loss; returns the total and the individual components.

    ``reg_losses`` holds one regression loss per RoI (zero for background RoIs);
    its mean is the regression term.
    """
    acl_value = torch.as_tensor(acl_value)
    reg_losses = torch.as_tensor(reg_losses)
    icls_value = torch.as_tensor(icls_value)
    reg_value = reg_losses.mean() if reg_losses.dim() > 0 else reg_losses
    parts = {"acl": acl_value, "reg": reg_value, "icls": icls_value}
    for name, value in parts.items():
        if not torch.isfinite(value).all():
            raise FloatingPointError(f"non-finite loss component '{name}': {value}")
    total = lambda1 * acl_value + lambda2 * reg_value + lambda3 * icls_value
    return total, {k: float(v.detach()) for k, v in parts.items()}


def roi_attention_weights(
    f: Tensor,
    classifier_weight: Tensor,
    rois: Tensor,
    labels: Tensor,
    stride: float,
    softmax_axis: str = "spatial",
    pool: str = "max",
    delta: float = DELTA,
    image_label: int | None = None,
) -> Tensor:
    """Per-RoI loss weights for one image.

    Foreground RoIs (label > 0, detector labels are 1-based) get their
    normalised attention score; background RoIs keep weight 1. With an
    ``image_label`` (0-based), every RoI is scored on that class's map and the
    normaliser is the max over all of them, so a pseudo box is compared
    against every proposal in the image rather than only against other pseudo
    boxes. No gradient flows through the returned weights.
    """
    with torch.no_grad():
        weights = torch.ones(rois.shape[0], dtype=f.dtype, device=f.device)
        fg = labels > 0
        if fg.any():
            M = class_softmax(compute_cam(f, classifier_weight), softmax_axis)
            if image_label is None:
                raw = roi_attention_pool(M, rois[fg], labels[fg] - 1, stride, pool)
                weights[fg] = normalize_attention(raw, delta)
            else:
                cls = torch.full((rois.shape[0],), int(image_label), dtype=torch.long)
                raw = roi_attention_pool(M, rois, cls, stride, pool)
                weights[fg] = normalize_attention(raw, delta)[fg]
    return weights
