"""Synthetic small-object scenes calibrated to published dataset aggregates.

The generator only matches summary statistics (objects per image, size
bucket fractions); it makes no attempt at visual realism. Every image has
its own RNG streams derived from ``(seed, image_id)``, one for the layout
and one for rendering, so layouts can be drawn without rendering and
parallel generation gives identical output.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError
from .metrics import MEDIUM_MAX_AREA, SMALL_MAX_AREA, size_bucket

log = logging.getLogger(__name__)

PAD_VALUE = 114.0 / 255.0
AREA_RANGES = {
    "small": (8.0 ** 2, SMALL_MAX_AREA),
    "medium": (SMALL_MAX_AREA, MEDIUM_MAX_AREA),
    "large": (MEDIUM_MAX_AREA, 160.0 ** 2),
}
MAX_PLACEMENT_ATTEMPTS = 100
# instance counts per bucket; the rounded percentages (94.51/5.48/0.02) sum to 100.01
BUCKET_COUNTS = {"small": 69413, "medium": 4022, "large": 13}
DEFAULT_SIZE_MIX = {k: v / sum(BUCKET_COUNTS.values()) for k, v in BUCKET_COUNTS.items()}

# class id -> rendering style
CLASS_STYLES = {1: "rect", 2: "rect", 3: "rect", 4: "line", 5: "line", 6: "line",
                7: "blob", 8: "blob", 9: "blob"}
CLASS_COLORS = {
    1: (0.90, 0.15, 0.15), 2: (0.15, 0.85, 0.20), 3: (0.15, 0.25, 0.90),
    4: (0.95, 0.95, 0.10), 5: (0.05, 0.05, 0.05), 6: (0.95, 0.95, 0.95),
    7: (0.80, 0.20, 0.80), 8: (0.10, 0.80, 0.80), 9: (0.95, 0.55, 0.10),
}


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 640
    classes: int = 9
    objects_per_image_mean: float = 7.34
    size_mix: dict = field(default_factory=lambda: dict(DEFAULT_SIZE_MIX))
    mean_area_target: float = 422.12
    seed: int = 0
    min_objects: int = 1
    max_objects: int = 30

    def __post_init__(self):
        if abs(sum(self.size_mix.values()) - 1.0) > 1e-6:
            raise ContractError("size_mix must sum to 1")
        if set(self.size_mix) != set(AREA_RANGES):
            raise ContractError(f"size_mix keys must be {sorted(AREA_RANGES)}")
        if self.classes < 1 or self.classes > len(CLASS_STYLES):
            raise ContractError(f"classes must be in [1, {len(CLASS_STYLES)}]")


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: int
    class_id: int
    box: tuple  # (cx, cy, w, h) in pixels

    @property
    def area(self) -> float:
        return self.box[2] * self.box[3]


def _rngs(spec: SceneSpec, image_id: int):
    return (np.random.default_rng([spec.seed, image_id, 0]),
            np.random.default_rng([spec.seed, image_id, 1]))


def _overlaps(box, placed) -> bool:
    cx, cy, w, h = box
    for px, py, pw, ph in placed:
        if abs(cx - px) * 2 < w + pw and abs(cy - py) * 2 < h + ph:
            return True
    return False


def generate_layout(spec: SceneSpec, image_id: int) -> list:
    """Draw the annotation boxes of one image (no rendering)."""
    rng, _ = _rngs(spec, image_id)
    size = spec.image_size
    n = int(np.clip(rng.poisson(spec.objects_per_image_mean), spec.min_objects, spec.max_objects))
    buckets = list(AREA_RANGES)
    probs = np.array([spec.size_mix[b] for b in buckets])
    placed, records = [], []
    for _ in range(n):
        cls = int(rng.integers(1, spec.classes + 1))
        bucket = buckets[rng.choice(len(buckets), p=probs)]
        lo, hi = AREA_RANGES[bucket]
        area = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        aspect = float(np.exp(rng.uniform(np.log(1 / 3), np.log(3))))
        w, h = np.sqrt(area * aspect), np.sqrt(area / aspect)
        if w > size or h > size:
            log.info("image %s: object %.1fx%.1f larger than canvas, skipped", image_id, w, h)
            continue
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            cx = rng.uniform(w / 2, size - w / 2)
            cy = rng.uniform(h / 2, size - h / 2)
            if not _overlaps((cx, cy, w, h), placed):
                placed.append((cx, cy, w, h))
                records.append(AnnotationRecord(image_id, cls, (float(cx), float(cy), float(w), float(h))))
                break
        else:
            log.info("image %s: could not place class-%d object after %d attempts",
                     image_id, cls, MAX_PLACEMENT_ATTEMPTS)
    return records


def _background(rng, size: int) -> np.ndarray:
    grid = 9
    coarse = rng.uniform(0.25, 0.75, (3, grid, grid))
    pos = np.linspace(0, grid - 1, size)
    i0 = np.minimum(pos.astype(int), grid - 2)
    f = pos - i0
    rows = coarse[:, i0, :] * (1 - f)[None, :, None] + coarse[:, i0 + 1, :] * f[None, :, None]
    img = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]
    img += rng.normal(0, 0.03, (3, size, size))
    return np.clip(img, 0.0, 1.0)


def _render(img, rec: AnnotationRecord, rng) -> None:
    cx, cy, w, h = rec.box
    x0, x1 = cx - w / 2, cx + w / 2
    y0, y1 = cy - h / 2, cy + h / 2
    c0, c1 = int(np.floor(x0)), int(np.ceil(x1))
    r0, r1 = int(np.floor(y0)), int(np.ceil(y1))
    yy, xx = np.mgrid[r0:r1, c0:c1] + 0.5
    style = CLASS_STYLES[rec.class_id]
    if style == "rect":
        mask = (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)
    elif style == "blob":
        mask = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    else:
        # diagonal segment from one corner to the opposite one
        flip = rng.random() < 0.5
        ax, ay, bx, by = (x0, y1, x1, y0) if flip else (x0, y0, x1, y1)
        dxl, dyl = bx - ax, by - ay
        t = np.clip(((xx - ax) * dxl + (yy - ay) * dyl) / (dxl ** 2 + dyl ** 2), 0, 1)
        d = np.hypot(xx - (ax + t * dxl), yy - (ay + t * dyl))
        thick = max(1.0, min(w, h) / 4)
        mask = (d <= thick / 2) & (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)
    if not mask.any():
        # degenerate sliver: mark the pixel under the center
        mask = (np.abs(xx - cx) <= 0.5) & (np.abs(yy - cy) <= 0.5)
    color = np.asarray(CLASS_COLORS[rec.class_id])
    patch = img[:, r0:r1, c0:c1]
    patch[:, mask] = color[:, None] * 0.9 + rng.normal(0, 0.02, (3, 1))


def generate_scene(spec: SceneSpec, image_id: int = 0):
    """Render one image. Returns (image of shape (1, 3, S, S) in [0, 1], annotations)."""
    records = generate_layout(spec, image_id)
    _, rrng = _rngs(spec, image_id)
    img = _background(rrng, spec.image_size)
    for rec in records:
        _render(img, rec, rrng)
    return np.clip(img, 0.0, 1.0)[None], records


# ---------------------------------------------------------------------------
# letterbox


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: int
    pad_y: int
    src_hw: tuple
    target: int

    def forward_box(self, box) -> tuple:
        cx, cy, w, h = box
        s = self.scale
        return (cx * s + self.pad_x, cy * s + self.pad_y, w * s, h * s)

    def inverse_box(self, box) -> tuple:
        cx, cy, w, h = box
        s = self.scale
        return ((cx - self.pad_x) / s, (cy - self.pad_y) / s, w / s, h / s)


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a (B, C, H, W) array."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    rows = img[..., r0, :] * (1 - fr)[:, None] + img[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1 - fc) + rows[..., c1] * fc


def letterbox(image, target: int = 640, pad_value: float = PAD_VALUE):
    """Resize the longer side to ``target`` and pad symmetrically to a square."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 4:
        raise ContractError("letterbox expects a (B, C, H, W) image")
    h, w = img.shape[-2:]
    scale = target / max(h, w)
    new_h, new_w = max(1, round(h * scale)), max(1, round(w * scale))
    resized = resize_bilinear(img, new_h, new_w)
    pad_y, pad_x = (target - new_h) // 2, (target - new_w) // 2
    out = np.full(img.shape[:2] + (target, target), pad_value)
    out[..., pad_y:pad_y + new_h, pad_x:pad_x + new_w] = resized
    return out, LetterboxTransform(scale, pad_x, pad_y, (h, w), target)


# ---------------------------------------------------------------------------
# statistics and dataset I/O


def dataset_stats(annotations, classes: int = 9, num_images: Optional[int] = None) -> dict:
    anns = list(annotations)
    if not anns:
        raise ContractError("dataset_stats needs at least one annotation")
    areas = np.array([a.area for a in anns])
    buckets = [size_bucket(a) for a in areas]
    per_image = {}
    for a in anns:
        per_image[a.image_id] = per_image.get(a.image_id, 0) + 1
    n_images = num_images if num_images is not None else len(per_image)
    counts = list(per_image.values()) + [0] * (n_images - len(per_image))
    hist = np.bincount(counts)
    return {
        "num_images": n_images,
        "num_objects": len(anns),
        "objects_per_image_mean": len(anns) / n_images,
        "objects_per_image_hist": {int(k): int(v) for k, v in enumerate(hist) if v},
        "size_fractions": {b: buckets.count(b) / len(anns) for b in ("small", "medium", "large")},
        "mean_area": float(areas.mean()),
        "per_class_counts": {c: sum(1 for a in anns if a.class_id == c)
                             for c in range(1, classes + 1)},
    }


def write_dataset(out_dir, spec: SceneSpec, num_images: int, render: bool = True) -> dict:
    """Write images (P6 PPM), ``annotations.jsonl`` and ``manifest.json``."""
    from .metrics import GroundTruth, write_jsonl
    from .pnm import write_ppm

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    all_anns = []
    for image_id in range(num_images):
        if render:
            img, anns = generate_scene(spec, image_id)
            write_ppm(out / "images" / f"{image_id:06d}.ppm", img)
        else:
            anns = generate_layout(spec, image_id)
        all_anns.extend(anns)
    write_jsonl(out / "annotations.jsonl",
                [GroundTruth(a.image_id, a.class_id, a.box) for a in all_anns])
    stats = dataset_stats(all_anns, spec.classes, num_images) if all_anns else {}
    manifest = {"spec": asdict(spec), "num_images": num_images, "rendered": render, "stats": stats}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
