"""Experiment configuration: INI-style sections of key/value pairs.

Keys may also appear before the first section (e.g. ``seed = 0``); they land
in the ``[run]`` section. Every key is addressable as ``section.key``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1


@dataclass
class BenchmarkSection:
    image_size: int = 64
    n_target_train: int = 300
    n_target_test: int = 240
    n_target_full: int = 300
    n_web_per_class: int = 60
    web_distractor_prob: float = 0.8


@dataclass
class BackboneSection:
    channels: int = 32
    layers: int = 4


@dataclass
class ProposalsSection:
    top_n: int = 32
    test_top_n: int = 48
    pre_nms_top_n: int = 150


@dataclass
class NmsSection:
    iou: float = 0.7
    detection_iou: float = 0.3


@dataclass
class LossSection:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    softmax_axis: str = "spatial"
    attention_pool: str = "max"
    delta: float = 1e-8
    cam_warmup_steps: int = 200


@dataclass
class TrainSection:
    steps: int = 600
    lr: float = 0.02
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_at: float = 0.8


@dataclass
class EstimatorSection:
    score_threshold: float = 0.8
    max_boxes_per_image: int = 20


@dataclass
class RfrSection:
    mid_channels: int = 16


@dataclass
class EvalSection:
    iou: float = 0.5
    interpolation: str = "11point"
    score_threshold: float = 0.01


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    proposals: ProposalsSection = field(default_factory=ProposalsSection)
    nms: NmsSection = field(default_factory=NmsSection)
    loss: LossSection = field(default_factory=LossSection)
    base_train: TrainSection = field(default_factory=lambda: TrainSection(steps=1500))
    web_train: TrainSection = field(default_factory=TrainSection)
    rfr_train: TrainSection = field(default_factory=lambda: TrainSection(steps=300, lr=0.01))
    ft_train: TrainSection = field(default_factory=lambda: TrainSection(steps=300, lr=0.01))
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    rfr: RfrSection = field(default_factory=RfrSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def flat(self) -> dict[str, Any]:
        """Every effective value as ``{"section.key": value}``."""
        out = {}
        for f in fields(self):
            section = getattr(self, f.name)
            for g in fields(section):
                out[f"{f.name}.{g.name}"] = getattr(section, g.name)
        return out

    def set(self, dotted: str, raw: Any) -> None:
        if "." not in dotted:
            dotted = f"run.{dotted}"
        section_name, key = dotted.split(".", 1)
        section = getattr(self, section_name, None)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigError(f"unknown config section [{section_name}]")
        types = {g.name: g.type for g in fields(section)}
        if key not in types:
            raise ConfigError(f"unknown config key {section_name}.{key}")
        current = getattr(section, key)
        setattr(section, key, _coerce(raw, type(current), f"{section_name}.{key}"))

    def to_ini(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"[{f.name}]")
            section = getattr(self, f.name)
            for g in fields(section):
                lines.append(f"{g.name} = {getattr(section, g.name)}")
            lines.append("")
        return "\n".join(lines)


def _coerce(raw: Any, kind: type, name: str):
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            return text.lower() in ("1", "true", "yes", "on")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind.__name__}") from None
    return text


def parse_config(text: str, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=False)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg.set(f"{section}.{key}", value)
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    return cfg


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config(text, overrides)
