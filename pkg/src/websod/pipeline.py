"""Stage orchestration: base detector, pseudo boxes, web detector, refinement,
the fine-tuning and fully supervised baselines, evaluation and the ablation table.

A work directory holds one checkpoint per stage plus JSON/text reports.
Stages check that their input checkpoints exist before doing anything.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint
from .config import ExperimentConfig
from .datamodel import Box, ClassSplit, TargetImageRecord, WebImageRecord, load_web_manifest, parse_voc_annotation
from .detector import (
    Detector,
    DetectorConfig,
    LossSpec,
    TrainConfig,
    TrainSample,
    build_detector,
    detect_all,
    train_detector,
    warmup_cam,
)
from .evaluation import EvalReport, evaluate_detections
from .region_estimator import (
    EstimatorConfig,
    PseudoLabelQuality,
    dump_pseudo,
    estimate_all,
    load_pseudo,
    pseudo_label_quality,
)
from .rfr import RfrBlock, RfrTrainState, assemble_final_detector, finetune_all, rfr_train
from .synth import SyntheticBenchmarkSpec, load_png, load_spec

logger = logging.getLogger(__name__)

STAGES = ("base_train", "estimate", "web_train", "rfr", "ft_baseline", "full_train")

CHECKPOINTS = {
    "base_train": "base.safetensors",
    "estimate": "pseudo.jsonl",
    "web_plain": "web_plain.safetensors",
    "web_acl": "web_acl.safetensors",
    "rfr": "rfr.safetensors",
    "ft_baseline": "ft.safetensors",
    "full_train": "full.safetensors",
}


class StageDependencyError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# datasets


def read_split(bench_dir: str | Path) -> ClassSplit:
    return load_spec(bench_dir).split


def load_target_dir(split_dir: str | Path, split: ClassSplit) -> list[TargetImageRecord]:
    split_dir = Path(split_dir)
    records = []
    for ann in sorted((split_dir / "annotations").glob("*.xml")):
        rec = parse_voc_annotation(ann.read_text(encoding="utf-8"), split, source=str(ann))
        records.append(rec.with_image(load_png(split_dir / "images" / f"{rec.image_id}.png")))
    return records


def load_web_dir(web_dir: str | Path, split: ClassSplit) -> list[WebImageRecord]:
    web_dir = Path(web_dir)
    manifest = web_dir / "manifest.tsv"
    records = load_web_manifest(manifest.read_text(encoding="utf-8"), split, source=str(manifest))
    return [r.with_image(load_png(web_dir / r.path)) for r in records]


def load_hidden_gt(bench_dir: str | Path, split: ClassSplit) -> dict[str, list[tuple[Box, int]]]:
    """Web-image ground truth; only the pseudo-label diagnostic reads this."""
    out = {}
    for ann in sorted((Path(bench_dir) / "web_hidden" / "annotations").glob("*.xml")):
        rec = parse_voc_annotation(ann.read_text(encoding="utf-8"), split, source=str(ann))
        out[rec.image_id] = [(g.box, g.class_id) for g in rec.objects]
    return out


def target_samples(records: Sequence[TargetImageRecord]) -> list[TrainSample]:
    return [
        TrainSample(
            r.image,
            np.array([g.box.as_tuple() for g in r.objects], dtype=np.float64).reshape(-1, 4),
            np.array([g.class_id for g in r.objects], dtype=np.int64),
        )
        for r in records
    ]


def web_samples(records: Sequence[WebImageRecord], pseudo, keep_unboxed: bool = False) -> list[TrainSample]:
    by_id = {p.image_id: p for p in pseudo}
    out = []
    for r in records:
        ann = by_id.get(r.image_id)
        boxes = [b.box.as_tuple() for b in ann.boxes] if ann else []
        if not boxes and not keep_unboxed:
            continue
        out.append(TrainSample(
            r.image,
            np.array(boxes, dtype=np.float64).reshape(-1, 4),
            np.full(len(boxes), r.image_label, dtype=np.int64),
            r.image_label,
        ))
    return out


# --------------------------------------------------------------------------
# configs


def detector_config(cfg: ExperimentConfig, num_classes: int) -> DetectorConfig:
    return DetectorConfig(
        num_classes=num_classes,
        channels=cfg.backbone.channels,
        num_layers=cfg.backbone.layers,
        top_n=cfg.proposals.top_n,
        test_top_n=cfg.proposals.test_top_n,
        pre_nms_top_n=cfg.proposals.pre_nms_top_n,
        proposal_nms=cfg.nms.iou,
        detection_nms=cfg.nms.detection_iou,
    )


def train_config(section, seed: int) -> TrainConfig:
    return TrainConfig(
        steps=section.steps, lr=section.lr, momentum=section.momentum, weight_decay=section.weight_decay,
        batch_size=section.batch_size, lr_decay_at=section.lr_decay_at, seed=seed,
    )


def loss_spec(cfg: ExperimentConfig, acl: bool) -> LossSpec:
    return LossSpec(
        acl=acl, image_cls=acl, rpn=True,
        lambda1=cfg.loss.lambda1, lambda2=cfg.loss.lambda2, lambda3=cfg.loss.lambda3,
        softmax_axis=cfg.loss.softmax_axis, attention_pool=cfg.loss.attention_pool, delta=cfg.loss.delta,
    )


def benchmark_spec(cfg: ExperimentConfig) -> SyntheticBenchmarkSpec:
    b = cfg.benchmark
    return SyntheticBenchmarkSpec(
        image_size=b.image_size, n_target_train=b.n_target_train, n_target_test=b.n_target_test,
        n_target_full=b.n_target_full, n_web_per_class=b.n_web_per_class,
        web_distractor_prob=b.web_distractor_prob, seed=cfg.seed,
    )


def setup_torch(cfg: ExperimentConfig) -> None:
    torch.set_num_threads(cfg.run.threads)
    torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------
# stages


@dataclass
class StageConfig:
    stage: str
    bench_dir: Path
    work_dir: Path
    config: ExperimentConfig
    acl: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        self.bench_dir = Path(self.bench_dir)
        self.work_dir = Path(self.work_dir)

    def path(self, key: str) -> Path:
        return self.work_dir / CHECKPOINTS[key]

    @property
    def output_key(self) -> str:
        if self.stage == "web_train":
            return "web_acl" if self.acl else "web_plain"
        return self.stage

    def require(self, key: str, producer: str) -> Path:
        p = self.path(key)
        if not p.exists():
            raise StageDependencyError(f"{self.stage} needs {p.name}; run stage '{producer}' first")
        return p


@dataclass
class StageResult:
    stage: str
    output: Path
    digest: str
    report: dict = field(default_factory=dict)


def save_detector(path: Path, model: Detector, stage: str) -> str:
    return checkpoint.save(path, model, checkpoint.DETECTOR_SCHEMA, model.cfg, {"stage": stage})


def load_detector(path: str | Path) -> Detector:
    state, header = checkpoint.load_state(path, checkpoint.DETECTOR_SCHEMA)
    raw = header["config"]
    raw["anchor_sizes"] = tuple(raw["anchor_sizes"])
    model = Detector(DetectorConfig(**raw))
    model.load_state_dict(state)
    return model


def save_rfr(path: Path, block: RfrBlock) -> str:
    cfg = {"channels": block.channels, "mid_channels": block.conv1.out_channels}
    return checkpoint.save(path, block, checkpoint.RFR_SCHEMA, cfg, {"stage": "rfr"})


def load_rfr(path: str | Path) -> RfrBlock:
    state, header = checkpoint.load_state(path, checkpoint.RFR_SCHEMA)
    block = RfrBlock(header["config"]["channels"], header["config"]["mid_channels"])
    block.load_state_dict(state)
    return block


def _file_digest(path: Path) -> str:
    import hashlib

    return hashlib.sha256(path.read_bytes()).hexdigest()


def _history_summary(history: Sequence[dict]) -> dict:
    if not history:
        return {"steps": 0}
    streams = sorted({h["stream"] for h in history})
    out: dict = {"steps": len(history)}
    for s in streams:
        hs = [h for h in history if h["stream"] == s]
        out[s] = {
            "first": {k: v for k, v in hs[0].items() if k not in ("step", "stream")},
            "last": {k: v for k, v in hs[-1].items() if k not in ("step", "stream")},
            "total_every_10": [round(h["total"], 6) for h in hs[::10]],
        }
    return out


def _write_report(work_dir: Path, name: str, report: dict) -> None:
    rdir = work_dir / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / f"{name}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    lines = [f"{k} = {v}" for k, v in sorted(report.items()) if not isinstance(v, (dict, list))]
    lines += [f"config.{k} = {v}" for k, v in sorted(report.get("config", {}).items())]
    (rdir / f"{name}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_stage(sc: StageConfig) -> StageResult:
    """Run one stage, write its checkpoint and report, and return them."""
    cfg = sc.config
    setup_torch(cfg)
    split = read_split(sc.bench_dir)
    sc.work_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    out = sc.path(sc.output_key)
    report: dict = {"stage": sc.stage, "output": out.name, "config": cfg.flat()}
    seed = cfg.seed
    dcfg = detector_config(cfg, split.num_classes)

    if sc.stage in ("base_train", "full_train"):
        sub = "target_train" if sc.stage == "base_train" else "target_full"
        data = target_samples(load_target_dir(sc.bench_dir / sub, split))
        section = cfg.base_train
        model = build_detector(dcfg, seed)
        res = train_detector(data, model, loss_spec(cfg, acl=False), train_config(section, seed))
        report["history"] = _history_summary(res.history)
        report["train_images"] = len(data)
        digest = save_detector(out, model, sc.stage)

    elif sc.stage == "estimate":
        base = load_detector(sc.require("base_train", "base_train"))
        est = EstimatorConfig(cfg.estimator.score_threshold, cfg.estimator.max_boxes_per_image)
        web = load_web_dir(sc.bench_dir / "web_train", split)
        pseudo = estimate_all(web, base, est)
        out.write_text(dump_pseudo(pseudo, split.vocabulary), encoding="utf-8")
        digest = _file_digest(out)
        quality = pseudo_label_quality(pseudo, load_hidden_gt(sc.bench_dir, split))
        report["pseudo_quality"] = quality.to_dict()
        report["images_with_boxes"] = sum(1 for p in pseudo if p.boxes)
        report["web_images"] = len(pseudo)

    elif sc.stage == "web_train":
        base_path = sc.require("base_train", "base_train")
        pseudo_path = sc.require("estimate", "estimate")
        pseudo = load_pseudo(pseudo_path.read_text(encoding="utf-8"), split.vocabulary)
        web = load_web_dir(sc.bench_dir / "web_train", split)
        data = web_samples(web, pseudo)
        model = load_detector(base_path)
        if sc.acl:
            warm = warmup_cam(data, model, dataclasses.replace(train_config(cfg.web_train, seed),
                                                               steps=cfg.loss.cam_warmup_steps))
            report["cam_warmup"] = _history_summary(warm)
        res = train_detector(data, model, loss_spec(cfg, acl=sc.acl), train_config(cfg.web_train, seed))
        report["history"] = _history_summary(res.history)
        report["acl"] = sc.acl
        report["train_images"] = len(data)
        digest = save_detector(out, model, f"web_train/{'acl' if sc.acl else 'plain'}")

    elif sc.stage in ("rfr", "ft_baseline"):
        web_model = load_detector(sc.require("web_acl", "web_train"))
        pseudo = load_pseudo(sc.require("estimate", "estimate").read_text(encoding="utf-8"), split.vocabulary)
        target = target_samples(load_target_dir(sc.bench_dir / "target_train", split))
        web = web_samples(load_web_dir(sc.bench_dir / "web_train", split), pseudo)
        state = RfrTrainState(web_model, target, web, num_base=len(split.base_classes), loss=loss_spec(cfg, acl=True))
        if sc.stage == "rfr":
            block = rfr_train(state, train_config(cfg.rfr_train, seed), cfg.rfr.mid_channels)
            digest = save_rfr(out, block)
        else:
            model = finetune_all(state, train_config(cfg.ft_train, seed))
            digest = save_detector(out, model, "ft_baseline")
        report["history"] = _history_summary(state.history)

    report["digest"] = digest
    report["seconds"] = round(time.perf_counter() - t0, 2)
    _write_report(sc.work_dir, sc.output_key, report)
    logger.info("stage %s -> %s (%s) in %.1fs", sc.stage, out.name, digest[:12], report["seconds"])
    return StageResult(sc.stage, out, digest, report)


# --------------------------------------------------------------------------
# evaluation


def evaluate_model(model: Detector, records: Sequence[TargetImageRecord], split: ClassSplit,
                   cfg: ExperimentConfig, iou: float | None = None) -> EvalReport:
    dets = detect_all([r.image for r in records], model, cfg.eval.score_threshold)
    return evaluate_detections(
        {r.image_id: d for r, d in zip(records, dets)},
        {r.image_id: list(r.objects) for r in records},
        split,
        iou_thresh=cfg.eval.iou if iou is None else iou,
        interpolation=cfg.eval.interpolation,
    )


def final_detector(detector_path: str | Path, rfr_path: str | Path | None = None) -> Detector:
    model = load_detector(detector_path)
    block = load_rfr(rfr_path) if rfr_path else None
    return assemble_final_detector(model, block)


ABLATION_ROWS = (
    ("Base WebSOD", "web_plain", None),
    ("WebSOD + ACL", "web_acl", None),
    ("WebSOD + ACL + FT", "ft_baseline", None),
    ("WebSOD + ACL + RFR", "web_acl", "rfr"),
    ("Fully Supervised", "full_train", None),
)


@dataclass
class AblationResult:
    reports: dict[str, EvalReport]
    quality: PseudoLabelQuality
    digests: dict[str, str]
    table: str


def format_ablation(reports: dict[str, EvalReport], quality: PseudoLabelQuality, iou: float) -> str:
    width = max(len(name) for name in reports)
    lines = [f"Ablation on synthetic target test set (AP %, IoU >= {iou})",
             f"{'Method'.ljust(width)} | Novel Mean | Base Mean |   mAP"]
    lines.append("-" * len(lines[-1]))
    for name, rep in reports.items():
        lines.append(f"{name.ljust(width)} | {100 * rep.novel_mean:10.2f} | {100 * rep.base_mean:9.2f} | "
                     f"{100 * rep.overall:5.2f}")
    lines.append("")
    lines.append(f"Pseudo boxes: {quality.n_pseudo} on web images, precision {quality.precision:.4f}, "
                 f"recall {quality.recall:.4f} (IoU >= 0.5, {quality.n_gt} labelled objects)")
    lines.append("")
    first = next(iter(reports.values()))
    lines.append("Per-class AP (%)")
    classes = list(first.per_class_ap)
    lines.append(f"{'Method'.ljust(width)} | " + " | ".join(c.rjust(8) for c in classes))
    for name, rep in reports.items():
        lines.append(f"{name.ljust(width)} | " + " | ".join(f"{100 * rep.per_class_ap[c]:8.2f}" for c in classes))
    return "\n".join(lines) + "\n"


def run_ablation(cfg: ExperimentConfig, bench_dir: str | Path, work_dir: str | Path) -> AblationResult:
    """Run every stage in order, evaluate each ladder row and write the comparison table."""
    bench_dir, work_dir = Path(bench_dir), Path(work_dir)
    digests = {}
    for stage, acl in [("base_train", False), ("estimate", False), ("web_train", False), ("web_train", True),
                       ("rfr", False), ("ft_baseline", False), ("full_train", False)]:
        res = run_stage(StageConfig(stage, bench_dir, work_dir, cfg, acl=acl))
        digests[res.output.name] = res.digest

    split = read_split(bench_dir)
    test = load_target_dir(bench_dir / "target_test", split)
    reports = {}
    for name, det_key, rfr_key in ABLATION_ROWS:
        model = final_detector(work_dir / CHECKPOINTS[det_key], work_dir / CHECKPOINTS[rfr_key] if rfr_key else None)
        reports[name] = evaluate_model(model, test, split, cfg)

    pseudo = load_pseudo((work_dir / CHECKPOINTS["estimate"]).read_text(encoding="utf-8"), split.vocabulary)
    quality = pseudo_label_quality(pseudo, load_hidden_gt(bench_dir, split))
    table = format_ablation(reports, quality, cfg.eval.iou)
    (work_dir / "ablation.txt").write_text(table, encoding="utf-8")
    kv = "".join(reports[name].to_kv(prefix=f"{key}.") for name, key in
                 zip(reports, ("base", "acl", "acl_ft", "acl_rfr", "full")))
    (work_dir / "ablation.kv").write_text(kv, encoding="utf-8")
    return AblationResult(reports, quality, digests, table)
