"""Command line entry point: ``websod <verb>``."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch
from PIL import Image

from . import attention
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load_config
from .datamodel import IngestionError
from .detector import TrainingError, _as_batch
from .pipeline import (
    CHECKPOINTS,
    StageConfig,
    StageDependencyError,
    benchmark_spec,
    evaluate_model,
    final_detector,
    load_detector,
    load_target_dir,
    read_split,
    run_ablation,
    run_stage,
    setup_torch,
)
from .synth import generate_synthetic_benchmark, load_png

EXPECTED_ERRORS = (StageDependencyError, ConfigError, IngestionError, CheckpointError, TrainingError,
                   FileExistsError, FileNotFoundError, ValueError)

MODELS = {
    "base": ("base_train", None),
    "web-plain": ("web_plain", None),
    "web-acl": ("web_acl", None),
    "rfr": ("web_acl", "rfr"),
    "ft": ("ft_baseline", None),
    "full": ("full_train", None),
}


def _config(path: str | None, overrides: tuple[str, ...]) -> ExperimentConfig:
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return load_config(path, pairs)


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except EXPECTED_ERRORS as exc:
        raise click.ClickException(f"{type(exc).__name__}: {exc}") from None


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="INI experiment config.")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                          help="Override a config key, e.g. --set loss.lambda3=0.5.")
bench_option = click.option("--bench", "bench_dir", required=True, type=click.Path(file_okay=False),
                            help="Benchmark directory.")
work_option = click.option("--work", "work_dir", required=True, type=click.Path(file_okay=False),
                           help="Directory for checkpoints and reports.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress.")
def main(verbose: bool) -> None:
    """Webly supervised object detection on a synthetic two-domain benchmark."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-bench")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
@config_option
@set_option
def gen_bench(out_dir, force, config_path, overrides):
    """Render the synthetic target and web datasets."""
    cfg = _guard(_config, config_path, overrides)
    spec = benchmark_spec(cfg)
    _guard(generate_synthetic_benchmark, spec, out_dir, force=force)
    click.echo(f"benchmark written to {out_dir}")


def _stage_command(name: str, stage: str, doc: str, with_acl: bool = False):
    def command(bench_dir, work_dir, config_path, overrides, acl=True):
        cfg = _guard(_config, config_path, overrides)
        res = _guard(run_stage, StageConfig(stage, bench_dir, work_dir, cfg, acl=acl))
        click.echo(f"{stage}: wrote {res.output} (sha256 {res.digest})")

    command.__doc__ = doc
    command = set_option(config_option(work_option(bench_option(command))))
    if with_acl:
        command = click.option("--acl/--no-acl", default=True, help="Attentive classification loss.")(command)
    main.command(name)(command)


_stage_command("train-base", "base_train", "Train the base-class detector on target images.")
_stage_command("estimate-regions", "estimate", "Harvest pseudo boxes from web images with the base detector.")
_stage_command("train-web", "web_train", "Train the web detector from pseudo boxes.", with_acl=True)
_stage_command("train-rfr", "rfr", "Train the residual refinement block on a frozen web detector.")
_stage_command("train-ft", "ft_baseline", "Fine-tune the web detector's features with a frozen head.")
_stage_command("train-full", "full_train", "Train the fully supervised upper bound on all-class target boxes.")


@main.command("eval")
@bench_option
@work_option
@click.option("--model", "model_name", type=click.Choice(sorted(MODELS)), default="rfr", show_default=True)
@click.option("--iou", type=float, default=None, help="IoU threshold; defaults to eval.iou from the config.")
@click.option("--split", "split_name", default="target_test", show_default=True)
@config_option
@set_option
def eval_cmd(bench_dir, work_dir, model_name, iou, split_name, config_path, overrides):
    """Evaluate one trained model and write reports/eval_<model>.{txt,kv}."""
    cfg = _guard(_config, config_path, overrides)
    setup_torch(cfg)
    work = Path(work_dir)
    det_key, rfr_key = MODELS[model_name]
    paths = [work / CHECKPOINTS[det_key]] + ([work / CHECKPOINTS[rfr_key]] if rfr_key else [])
    for p in paths:
        if not p.exists():
            raise click.ClickException(f"missing checkpoint {p}")
    model = _guard(final_detector, *paths)
    split = _guard(read_split, bench_dir)
    records = _guard(load_target_dir, Path(bench_dir) / split_name, split)
    report = evaluate_model(model, records, split, cfg, iou=iou)
    text = report.to_text(title=model_name)
    rdir = work / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    suffix = f"{model_name}_iou{report.iou_threshold:g}"
    (rdir / f"eval_{suffix}.txt").write_text(text, encoding="utf-8")
    (rdir / f"eval_{suffix}.kv").write_text(report.to_kv(), encoding="utf-8")
    click.echo(text, nl=False)


@main.command("ablate")
@bench_option
@work_option
@config_option
@set_option
def ablate(bench_dir, work_dir, config_path, overrides):
    """Run every stage and print the ablation table (also written to ablation.txt)."""
    cfg = _guard(_config, config_path, overrides)
    if not (Path(bench_dir) / "benchmark.json").exists():
        raise click.ClickException(f"no benchmark in {bench_dir}; run gen-bench first")
    result = _guard(run_ablation, cfg, bench_dir, work_dir)
    click.echo(result.table, nl=False)


@main.command("dump-cam")
@work_option
@click.option("--image", "image_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--model", "model_name", type=click.Choice(["web-acl", "web-plain"]), default="web-acl",
              show_default=True)
@click.option("--bench", "bench_dir", type=click.Path(file_okay=False), default=None,
              help="Benchmark directory, used for class names.")
def dump_cam(work_dir, image_path, out_dir, model_name, bench_dir):
    """Write one grayscale attention overlay per class for an image."""
    det_key, _ = MODELS[model_name]
    ckpt = Path(work_dir) / CHECKPOINTS[det_key]
    if not ckpt.exists():
        raise click.ClickException(f"missing checkpoint {ckpt}")
    model = _guard(load_detector, ckpt)
    model.eval()
    image = load_png(image_path)
    names = list(read_split(bench_dir).vocabulary) if bench_dir else [str(c) for c in range(model.cfg.num_classes)]
    with torch.no_grad():
        fm = model.backbone(_as_batch([image], next(model.parameters()).dtype))
        logits, f = attention.cam_forward(fm, model.cam)
        maps = attention.class_softmax(attention.compute_cam(f[0], model.cam.classifier.weight), "spatial")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, w = image.shape[:2]
    gray = np.asarray(Image.fromarray((image * 255).astype(np.uint8)).convert("L"), dtype=np.float64) / 255.0
    stem = Path(image_path).stem
    for c, name in enumerate(names):
        m = maps[c].numpy()
        m = m / m.max() if m.max() > 0 else m
        up = np.asarray(Image.fromarray((m * 255).astype(np.uint8)).resize((w, h), Image.BILINEAR)) / 255.0
        overlay = 0.4 * gray + 0.6 * up
        Image.fromarray((overlay * 255).round().astype(np.uint8)).save(out / f"{stem}_cam_{name}.png")
    probs = torch.softmax(logits[0], 0)
    best = int(probs.argmax())
    click.echo(f"wrote {len(names)} maps to {out}; image classifier says {names[best]} ({float(probs[best]):.3f})")


if __name__ == "__main__":
    sys.exit(main())
