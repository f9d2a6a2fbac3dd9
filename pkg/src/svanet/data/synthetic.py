"""Synthetic small-object segmentation sets: ellipses and tubes on textured noise."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ..core import ConfigurationError, Rng
from .area import EIGHT_CONNECTED, ObjectRecord, bucket_of, object_records, write_manifest

SHAPES = ("ellipse", "tube")


@dataclass
class SynthSpec:
    canvas: int = 128
    num_classes: int = 3
    objects_per_image: tuple[int, int] = (1, 3)
    shapes: tuple[str, ...] = SHAPES
    area_ratio: tuple[float, float] = (0.002, 0.008)
    count: int = 16
    seed: int = 0
    margin: int = 2
    retries: int = 50
    tolerance: float = 0.10

    def __post_init__(self):
        lo, hi = self.area_ratio
        if not 0 < lo <= hi < 1:
            raise ConfigurationError(f"area_ratio must satisfy 0 < lo <= hi < 1, got {self.area_ratio}")
        if lo * self.canvas ** 2 < 4:
            raise ConfigurationError(f"area ratio {lo} is under 4 pixels on a {self.canvas}^2 canvas")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if any(s not in SHAPES for s in self.shapes) or not self.shapes:
            raise ConfigurationError(f"shapes must be drawn from {SHAPES}")
        a, b = self.objects_per_image
        if not 0 <= a <= b:
            raise ConfigurationError(f"objects_per_image must satisfy 0 <= min <= max, got {self.objects_per_image}")


def _ellipse(shape, cy, cx, a, b, theta):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _tube(shape, cy, cx, length, width, theta, bend):
    """Thick quadratic curve of the given length and width."""
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    t = np.linspace(-0.5, 0.5, max(8, int(length * 2)))
    c, s = math.cos(theta), math.sin(theta)
    along, across = t * length, bend * length * (t * t - 0.25)
    py = cy + along * s + across * c
    px = cx + along * c - across * s
    out = np.zeros(shape, dtype=bool)
    r2 = (width / 2) ** 2
    lo_y, hi_y = int(max(0, py.min() - width)), int(min(shape[0], py.max() + width + 1))
    lo_x, hi_x = int(max(0, px.min() - width)), int(min(shape[1], px.max() + width + 1))
    if lo_y >= hi_y or lo_x >= hi_x:
        return out
    sy, sx = yy[lo_y:hi_y, lo_x:hi_x], xx[lo_y:hi_y, lo_x:hi_x]
    d2 = np.full(sy.shape, np.inf)
    for y, x in zip(py, px):
        d2 = np.minimum(d2, (sy - y) ** 2 + (sx - x) ** 2)
    out[lo_y:hi_y, lo_x:hi_x] = d2 <= r2
    return out


class _Shape:
    """A shape family parameterized by one linear scale, tuned to hit an area."""

    def __init__(self, kind: str, rng: Rng, canvas: int):
        self.kind = kind
        self.theta = float(rng.uniform(0, math.pi))
        self.cy = float(rng.uniform(0, canvas - 1))
        self.cx = float(rng.uniform(0, canvas - 1))
        if kind == "ellipse":
            self.aspect = float(rng.uniform(1.0, 2.5))
        else:
            self.aspect = float(rng.uniform(4.0, 8.0))
            self.bend = float(rng.uniform(-0.6, 0.6))

    def initial_scale(self, area: float) -> float:
        if self.kind == "ellipse":
            return math.sqrt(area / (math.pi * self.aspect))
        return math.sqrt(area / self.aspect)

    def raster(self, shape, scale: float) -> np.ndarray:
        if self.kind == "ellipse":
            return _ellipse(shape, self.cy, self.cx, scale * self.aspect, scale, self.theta)
        return _tube(shape, self.cy, self.cx, scale * self.aspect, scale, self.theta, self.bend)


def _fit_area(shape: _Shape, canvas_shape, target: int, tolerance: float) -> np.ndarray | None:
    """Bisect the shape scale until the pixel count is within tolerance of target."""
    lo, hi = 0.0, shape.initial_scale(target) * 4
    best = None
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        m = shape.raster(canvas_shape, mid)
        px = int(m.sum())
        if abs(px - target) <= tolerance * target:
            best = m
            break
        lo, hi = (mid, hi) if px < target else (lo, mid)
    if best is None:
        return None
    _, n = ndimage.label(best, structure=EIGHT_CONNECTED)
    return best if n == 1 else None


def _background(rng: Rng, canvas: int) -> np.ndarray:
    noise = rng.normal(size=(3, canvas, canvas))
    coarse = np.stack([ndimage.gaussian_filter(c, 6, mode="wrap") for c in noise])
    fine = rng.normal(scale=0.03, size=(3, canvas, canvas))
    base = rng.uniform(0.3, 0.5, size=(3, 1, 1))
    return base + 0.08 * coarse / (np.abs(coarse).max() + 1e-12) + fine


def class_colors(num_classes: int) -> np.ndarray:
    """Fixed, well separated tints per foreground class (row 0 unused)."""
    hues = np.linspace(0, 1, num_classes, endpoint=False)
    rgb = np.stack([0.5 + 0.4 * np.cos(2 * np.pi * (hues + k / 3)) for k in range(3)], axis=1)
    return rgb


@dataclass
class SynthResult:
    root: Path
    records: list[ObjectRecord] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)


def generate_image(spec: SynthSpec, rng: Rng, image_id: str) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    n = spec.canvas
    image = _background(rng.stream("background"), n)
    mask = np.zeros((n, n), dtype=np.uint8)
    occupied = np.zeros((n, n), dtype=bool)
    colors = class_colors(spec.num_classes)
    skipped = []
    lo, hi = spec.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    for k in range(count):
        obj_rng = rng.stream(f"object{k}")
        cls = int(obj_rng.integers(1, spec.num_classes))
        kind = spec.shapes[int(obj_rng.integers(0, len(spec.shapes)))]
        ratio = float(obj_rng.uniform(*spec.area_ratio))
        target = max(1, int(round(ratio * n * n)))
        placed = None
        for attempt in range(spec.retries):
            shape = _Shape(kind, obj_rng.stream(f"try{attempt}"), n)
            m = _fit_area(shape, (n, n), target, spec.tolerance)
            if m is None:
                continue
            halo = ndimage.binary_dilation(m, structure=EIGHT_CONNECTED, iterations=spec.margin)
            if (halo & occupied).any():
                continue
            placed = (m, halo)
            break
        if placed is None:
            skipped.append({"image_id": image_id, "object": k, "class_id": cls, "target_ratio": ratio})
            continue
        m, halo = placed
        occupied |= halo
        mask[m] = cls
        shade = colors[cls][:, None] + obj_rng.normal(scale=0.04, size=(3, int(m.sum())))
        image[:, m] = shade
    image = ndimage.gaussian_filter(image, (0, 0.6, 0.6))
    return np.clip(image, 0, 1), mask, skipped


def generate_synthetic(spec: SynthSpec, root, split: str | None = None) -> SynthResult:
    """Write ``images/``, ``masks/`` and ``manifest.jsonl`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    base = Rng(spec.seed, f"synthetic/{split or 'data'}")
    result = SynthResult(root)
    width = max(4, len(str(spec.count - 1)))
    for i in range(spec.count):
        image_id = f"{i:0{width}d}"
        image, mask, skipped = generate_image(spec, base.stream(image_id), image_id)
        Image.fromarray(np.round(image.transpose(1, 2, 0) * 255).astype(np.uint8), "RGB") \
            .save(root / "images" / f"{image_id}.png")
        Image.fromarray(mask, "L").save(root / "masks" / f"{image_id}.png")
        result.records.extend(object_records(mask, image_id, spec.num_classes))
        result.skipped.extend(skipped)
    write_manifest(root / "manifest.jsonl", result.records)
    summary = {"spec": asdict(spec), "split": split, "objects": len(result.records), "skipped": result.skipped}
    (root / "synth.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


def generate_splits(spec: SynthSpec, root, train: int, test: int) -> dict[str, SynthResult]:
    root = Path(root)
    out = {}
    for split, count in (("train", train), ("test", test)):
        s = SynthSpec(**{**asdict(spec), "count": count})
        out[split] = generate_synthetic(s, root / split, split)
    return out


def audit(result: SynthResult, spec: SynthSpec) -> list[str]:
    """Problems with generated objects: wrong bucket or ratio outside the target band."""
    lo, hi = spec.area_ratio
    problems = []
    for r in result.records:
        if not lo * (1 - spec.tolerance) - 1e-12 <= r.ratio <= hi * (1 + spec.tolerance) + 1e-12:
            problems.append(f"{r.image_id}: ratio {r.ratio:.5f} outside target band")
        if bucket_of(r.ratio).value != r.bucket:
            problems.append(f"{r.image_id}: bucket mismatch")
    return problems
