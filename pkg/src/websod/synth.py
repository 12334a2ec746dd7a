"""Two-domain synthetic shapes benchmark.

Target domain: textured backgrounds, one to three small objects per image,
box annotations in VOC XML. Web domain: flat pastel backgrounds with one large
centred object named by the image label and, sometimes, a smaller unlabelled
object of another class in a corner. Web ground truth is written to a separate
``web_hidden`` tree that training code never reads.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .datamodel import Box, ClassSplit, GroundTruth, TargetImageRecord, WebImageRecord, dump_web_manifest, \
    serialize_voc_annotation

SHAPES = ("circle", "square", "triangle", "cross", "hexagon", "diamond", "ring", "star", "bar", "crescent", "heart")
SUPERSAMPLE = 4


@dataclass
class SyntheticBenchmarkSpec:
    base_classes: tuple[str, ...] = ("circle", "square", "triangle", "cross", "bar", "crescent")
    novel_classes: tuple[str, ...] = ("hexagon", "diamond")
    image_size: int = 64
    n_target_train: int = 300
    n_target_test: int = 240
    n_target_full: int = 300
    n_web_per_class: int = 60
    target_objects: tuple[int, int] = (1, 3)
    target_scale: tuple[float, float] = (14.0, 28.0)
    web_scale: tuple[float, float] = (20.0, 34.0)
    web_distractor_prob: float = 0.8
    web_distractor_scale: tuple[float, float] = (16.0, 24.0)
    seed: int = 0

    def __post_init__(self):
        self.base_classes = tuple(self.base_classes)
        self.novel_classes = tuple(self.novel_classes)
        unknown = [c for c in self.base_classes + self.novel_classes if c not in SHAPES]
        if unknown:
            raise ValueError(f"unknown shape classes {unknown}; choose from {SHAPES}")
        ClassSplit(self.base_classes, self.novel_classes)

    @property
    def split(self) -> ClassSplit:
        return ClassSplit(self.base_classes, self.novel_classes)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SyntheticBenchmarkSpec":
        d = json.loads(text)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


# --------------------------------------------------------------------------
# shape masks


def _regular_polygon(n: int, phase: float) -> list[tuple[float, float]]:
    return [(math.cos(phase + 2 * math.pi * i / n), math.sin(phase + 2 * math.pi * i / n)) for i in range(n)]


def _star() -> list[tuple[float, float]]:
    pts = []
    for i in range(10):
        r = 1.0 if i % 2 == 0 else 0.42
        a = -math.pi / 2 + math.pi * i / 5
        pts.append((r * math.cos(a), r * math.sin(a)))
    return pts


def _cross(t: float = 0.36) -> list[tuple[float, float]]:
    return [(-t, -1), (t, -1), (t, -t), (1, -t), (1, t), (t, t), (t, 1), (-t, 1), (-t, t), (-1, t), (-1, -t), (-t, -t)]


def _outline(shape: str) -> list[tuple[float, float]] | None:
    if shape == "square":
        return [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    if shape == "triangle":
        return [(0, -1), (1, 0.8), (-1, 0.8)]
    if shape == "diamond":
        return [(0, -1), (1, 0), (0, 1), (-1, 0)]
    if shape == "hexagon":
        return _regular_polygon(6, 0.0)
    if shape == "star":
        return _star()
    if shape == "cross":
        return _cross()
    if shape == "bar":
        return [(-1, -0.38), (1, -0.38), (1, 0.38), (-1, 0.38)]
    if shape == "heart":
        pts = []
        for i in range(48):
            t = 2 * math.pi * i / 48
            x = 16 * math.sin(t) ** 3
            y = -(13 * math.cos(t) - 5 * math.cos(2 * t) - 2 * math.cos(3 * t) - math.cos(4 * t))
            pts.append((x / 16, (y + 2.5) / 14.5))
        return pts
    return None


def shape_mask(shape: str, size: int, sx: float, sy: float, cx: float, cy: float, angle: float) -> np.ndarray:
    """Anti-aliased alpha mask in [0, 1] of one shape on a ``size`` x ``size`` canvas.

    ``sx``/``sy`` are the shape's full width and height in pixels before rotation.
    """
    big = size * SUPERSAMPLE
    img = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(img)
    hx, hy = sx * SUPERSAMPLE / 2, sy * SUPERSAMPLE / 2
    ccx, ccy = cx * SUPERSAMPLE, cy * SUPERSAMPLE
    ca, sa = math.cos(angle), math.sin(angle)

    def place(pts):
        return [(ccx + ca * x * hx - sa * y * hy, ccy + sa * x * hx + ca * y * hy) for x, y in pts]

    if shape in ("circle", "ring"):
        n = 48
        draw.polygon(place(_regular_polygon(n, 0.0)), fill=255)
        if shape == "ring":
            draw.polygon(place([(0.5 * x, 0.5 * y) for x, y in _regular_polygon(n, 0.0)]), fill=0)
    elif shape == "crescent":
        n = 48
        draw.polygon(place(_regular_polygon(n, 0.0)), fill=255)
        draw.polygon(place([(0.85 * x + 0.45, 0.85 * y - 0.1) for x, y in _regular_polygon(n, 0.0)]), fill=0)
    else:
        draw.polygon(place(_outline(shape)), fill=255)
    small = img.resize((size, size), Image.BOX)
    return np.asarray(small, dtype=np.float64) / 255.0


def mask_box(mask: np.ndarray, thresh: float = 0.5) -> Box | None:
    ys, xs = np.nonzero(mask >= thresh)
    if xs.size == 0:
        return None
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


# --------------------------------------------------------------------------
# backgrounds and objects


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells, 3))
    img = Image.fromarray((coarse * 255).astype(np.uint8)).resize((size, size), Image.BICUBIC)
    return np.asarray(img, dtype=np.float64) / 255.0


def target_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Cluttered mid-tone texture: blotches, stripes and pixel noise."""
    base = 0.25 + 0.35 * _smooth_noise(rng, size, int(rng.integers(3, 7)))
    detail = _smooth_noise(rng, size, int(rng.integers(10, 18))) - 0.5
    bg = base + 0.25 * detail
    if rng.random() < 0.5:
        freq = rng.uniform(0.25, 0.6)
        theta = rng.uniform(0, math.pi)
        yy, xx = np.mgrid[0:size, 0:size]
        stripes = 0.08 * np.sin(freq * (xx * math.cos(theta) + yy * math.sin(theta)))
        bg = bg + stripes[..., None]
    bg = bg + rng.normal(0, 0.04, bg.shape)
    return np.clip(bg, 0, 1)


def web_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Bright backdrop with a gentle gradient and faint texture."""
    c0 = rng.uniform(0.7, 0.92, 3)
    c1 = np.clip(c0 + rng.uniform(-0.12, 0.12, 3), 0, 1)
    t = np.linspace(0, 1, size)
    if rng.random() < 0.5:
        ramp = t[None, :, None]
    else:
        ramp = t[:, None, None]
    bg = c0 * (1 - ramp) + c1 * ramp
    bg = bg + 0.12 * (_smooth_noise(rng, size, int(rng.integers(10, 18))) - 0.5)
    bg = bg + rng.normal(0, 0.02, (size, size, 3))
    return np.clip(bg, 0, 1)


def _object_color(rng: np.random.Generator) -> np.ndarray:
    hue = rng.random()
    sat = rng.uniform(0.55, 1.0)
    val = rng.uniform(0.45, 0.95)
    i = int(hue * 6) % 6
    f = hue * 6 - int(hue * 6)
    p, q, t = val * (1 - sat), val * (1 - f * sat), val * (1 - (1 - f) * sat)
    rgb = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)][i]
    return np.array(rgb)


@dataclass
class _Placed:
    class_id: int
    box: Box


def _paint(rng: np.random.Generator, canvas: np.ndarray, shape: str, scale: float, cx: float, cy: float) -> Box | None:
    size = canvas.shape[0]
    aspect = rng.uniform(0.85, 1.15)
    sx, sy = scale * aspect, scale / aspect
    angle = rng.uniform(-0.17, 0.17)
    mask = shape_mask(shape, size, sx, sy, cx, cy, angle)
    box = mask_box(mask)
    if box is None:
        return None
    color = _object_color(rng)
    canvas[:] = canvas * (1 - mask[..., None]) + color * mask[..., None]
    return box


def _free_spot(rng, size, scale, placed: list[_Placed], margin=1.0, tries=40):
    half = scale / 2
    for _ in range(tries):
        cx = rng.uniform(half + margin, size - half - margin)
        cy = rng.uniform(half + margin, size - half - margin)
        cand = (cx - half, cy - half, cx + half, cy + half)
        clear = all(
            cand[2] <= p.box.x1 - 1 or cand[0] >= p.box.x2 + 1 or cand[3] <= p.box.y1 - 1 or cand[1] >= p.box.y2 + 1
            for p in placed
        )
        if clear:
            return cx, cy
    return None


def render_target_image(rng: np.random.Generator, spec: SyntheticBenchmarkSpec, class_pool: tuple[int, ...]):
    size = spec.image_size
    canvas = target_background(rng, size)
    vocab = spec.split.vocabulary
    placed: list[_Placed] = []
    n = int(rng.integers(spec.target_objects[0], spec.target_objects[1] + 1))
    for _ in range(n):
        c = int(rng.choice(class_pool))
        scale = rng.uniform(*spec.target_scale)
        spot = _free_spot(rng, size, scale * 1.15, placed)
        if spot is None:
            continue
        box = _paint(rng, canvas, vocab[c], scale, *spot)
        if box is not None:
            placed.append(_Placed(c, box))
    return canvas, placed


def render_web_image(rng: np.random.Generator, spec: SyntheticBenchmarkSpec, label: int):
    size = spec.image_size
    canvas = web_background(rng, size)
    vocab = spec.split.vocabulary
    placed: list[_Placed] = []
    if rng.random() < spec.web_distractor_prob:
        others = [c for c in range(len(vocab)) if c != label]
        d = int(rng.choice(others))
        dscale = rng.uniform(*spec.web_distractor_scale)
        corner = int(rng.integers(4))
        off = dscale / 2 + 1.5
        cx = off if corner % 2 == 0 else size - off
        cy = off if corner < 2 else size - off
        box = _paint(rng, canvas, vocab[d], dscale, cx, cy)
        if box is not None:
            placed.append(_Placed(d, box))
    scale = rng.uniform(*spec.web_scale)
    jitter = size * 0.08
    cx = size / 2 + rng.uniform(-jitter, jitter)
    cy = size / 2 + rng.uniform(-jitter, jitter)
    # shrink the main object until its (generous) footprint clears the distractor
    while placed and scale > spec.web_scale[0] * 0.6:
        half = scale * 0.65
        d = placed[0].box
        if cx + half <= d.x1 or cx - half >= d.x2 or cy + half <= d.y1 or cy - half >= d.y2:
            break
        scale *= 0.92
    box = _paint(rng, canvas, vocab[label], scale, cx, cy)
    placed.append(_Placed(label, box))
    return canvas, placed


# --------------------------------------------------------------------------
# writing and reading


def _save_png(path: Path, img: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path, format="PNG", optimize=False)


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _write_target_split(root: Path, name: str, rng, spec, class_pool, count) -> None:
    split = spec.split
    for i in range(count):
        img, placed = render_target_image(rng, spec, class_pool)
        image_id = f"{name}_{i:05d}"
        _save_png(root / name / "images" / f"{image_id}.png", img)
        rec = TargetImageRecord(image_id, tuple(GroundTruth(p.box, p.class_id) for p in placed), None,
                                spec.image_size, spec.image_size)
        ann = root / name / "annotations" / f"{image_id}.xml"
        ann.parent.mkdir(parents=True, exist_ok=True)
        ann.write_text(serialize_voc_annotation(rec, split), encoding="utf-8")


LAYOUT = ("target_train", "target_test", "target_full", "web_train", "web_hidden")


def generate_synthetic_benchmark(spec: SyntheticBenchmarkSpec, out_dir: str | Path, force: bool = False) -> Path:
    """Render every split under ``out_dir``; same spec gives byte-identical files."""
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} is not empty; pass force=True (--force) to overwrite")
        for name in LAYOUT:
            if (root / name).exists():
                shutil.rmtree(root / name)
    root.mkdir(parents=True, exist_ok=True)
    split = spec.split
    seeds = np.random.SeedSequence(spec.seed).spawn(4)
    (root / "benchmark.json").write_text(spec.to_json(), encoding="utf-8")

    _write_target_split(root, "target_train", np.random.default_rng(seeds[0]), spec, split.base_ids,
                        spec.n_target_train)
    all_ids = split.base_ids + split.novel_ids
    _write_target_split(root, "target_test", np.random.default_rng(seeds[1]), spec, all_ids, spec.n_target_test)
    _write_target_split(root, "target_full", np.random.default_rng(seeds[2]), spec, all_ids, spec.n_target_full)

    rng = np.random.default_rng(seeds[3])
    records = []
    for c in all_ids:
        for i in range(spec.n_web_per_class):
            image_id = f"web_{split.vocabulary[c]}_{i:04d}"
            img, placed = render_web_image(rng, spec, c)
            rel = f"images/{image_id}.png"
            _save_png(root / "web_train" / rel, img)
            records.append(WebImageRecord(image_id, rel, c))
            hidden = TargetImageRecord(image_id, tuple(GroundTruth(p.box, p.class_id) for p in placed), None,
                                       spec.image_size, spec.image_size)
            ann = root / "web_hidden" / "annotations" / f"{image_id}.xml"
            ann.parent.mkdir(parents=True, exist_ok=True)
            ann.write_text(serialize_voc_annotation(hidden, split), encoding="utf-8")
    (root / "web_train" / "manifest.tsv").write_text(dump_web_manifest(records, split), encoding="utf-8")
    return root


def load_spec(root: str | Path) -> SyntheticBenchmarkSpec:
    return SyntheticBenchmarkSpec.from_json((Path(root) / "benchmark.json").read_text(encoding="utf-8"))
