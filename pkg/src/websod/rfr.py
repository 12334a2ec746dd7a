"""Residual feature refinement of RoI features, and the fine-tuning baseline.

The block computes ``F_hat = F * T + F`` where ``T`` comes from a
conv-ReLU-conv-ReLU-conv stack on ``F``. Its last conv starts at zero, so an
untrained block is the identity. During refinement the whole web detector is
frozen and only the block learns, from target-domain base-class batches and
web batches taken in turn.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .checkpoint import state_digest
from .detector import Detector, LossSpec, TrainConfig, TrainSample, TrainingError, run_steps

logger = logging.getLogger(__name__)


class RfrBlock(nn.Module):
    def __init__(self, channels: int, mid_channels: int | None = None):
        super().__init__()
        mid = mid_channels or max(1, channels // 2)
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, mid, 3, padding=1)
        self.conv2 = nn.Conv2d(mid, mid, 3, padding=1)
        self.conv3 = nn.Conv2d(mid, channels, 3, padding=1)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def residual(self, x: Tensor) -> Tensor:
        return self.conv3(F.relu(self.conv2(F.relu(self.conv1(x)))))

    def forward(self, x: Tensor) -> Tensor:
        return rfr_forward(x, self)


def rfr_forward(feats: Tensor, block: RfrBlock) -> Tensor:
    """``feats * T + feats`` for RoI features of shape ``(N, C, h, w)``."""
    if feats.dim() != 4 or feats.shape[1] != block.channels:
        raise ValueError(f"RoI features {tuple(feats.shape)} do not match a {block.channels}-channel block")
    return feats * block.residual(feats) + feats


@dataclass
class RfrTrainState:
    """Frozen web detector plus the two data streams used for refinement.

    ``num_base`` enables the check that target samples carry base classes only
    (base ids are ``0 .. num_base - 1``).
    """

    detector: Detector
    target: Sequence[TrainSample]
    web: Sequence[TrainSample]
    num_base: int | None = None
    block: RfrBlock | None = None
    web_acl: bool = True
    loss: LossSpec = field(default_factory=LossSpec)
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.num_base is not None:
            bad = [i for i, s in enumerate(self.target) if any(int(c) >= self.num_base for c in s.labels)]
            if bad:
                raise ValueError(f"target stream must hold base classes only; samples {bad[:5]} do not")


def _streams(state: RfrTrainState, with_rpn: bool) -> list[tuple[str, Sequence[TrainSample], LossSpec]]:
    target_spec = dataclasses.replace(state.loss, acl=False, image_cls=False, rpn=with_rpn)
    web_spec = dataclasses.replace(state.loss, acl=state.web_acl, image_cls=with_rpn, rpn=with_rpn)
    web = [s for s in state.web if len(s.boxes)]
    streams = [("target", state.target, target_spec)]
    if web:
        streams.append(("web", web, web_spec))
    return streams


def rfr_train(state: RfrTrainState, schedule: TrainConfig, mid_channels: int | None = None) -> RfrBlock:
    """Train a refinement block on top of a frozen copy of ``state.detector``."""
    model = copy.deepcopy(state.detector)
    for p in model.parameters():
        p.requires_grad_(False)
    frozen_before = state_digest(model)
    torch.manual_seed(schedule.seed)
    block = state.block if state.block is not None else RfrBlock(model.cfg.channels, mid_channels)
    block = block.to(next(model.parameters()).dtype)
    model.refine = block
    if schedule.steps:
        state.history = run_steps(_streams(state, with_rpn=False), model, list(block.parameters()), schedule)
    model.refine = None
    if state_digest(model) != frozen_before:
        raise TrainingError("frozen detector parameters changed during refinement")
    state.block = block
    return block


HEAD_LAYERS = ("box_head.cls_score.", "box_head.bbox_pred.")


def head_digest(model: Detector) -> str:
    return state_digest({k: v for k, v in model.state_dict().items() if k.startswith(HEAD_LAYERS)})


def finetune_all(state: RfrTrainState, schedule: TrainConfig) -> Detector:
    """Fine-tune every layer except the box classifier and regressor (no residual block)."""
    model = copy.deepcopy(state.detector)
    model.refine = None
    head_before = head_digest(model)
    params = []
    for name, p in model.named_parameters():
        trainable = not name.startswith(HEAD_LAYERS)
        p.requires_grad_(trainable)
        if trainable:
            params.append(p)
    if schedule.steps:
        state.history = run_steps(_streams(state, with_rpn=True), model, params, schedule)
    if head_digest(model) != head_before:
        raise TrainingError("detection head changed during fine-tuning")
    for p in model.parameters():
        p.requires_grad_(True)
    return model


def assemble_final_detector(web_model: Detector, block: RfrBlock | None) -> Detector:
    """Copy of the web detector with the block inserted after RoI feature extraction."""
    model = copy.deepcopy(web_model)
    model.refine = copy.deepcopy(block) if block is not None else None
    model.eval()
    return model
