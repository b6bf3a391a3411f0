"""End-to-end smoke run: generated scenes -> block stack -> feature dumps -> eval.

The block stack (EEBlock, SPDConv, CSDMAM) uses fixed random weights and
only exercises shapes and numerics; detections come from an oracle that
jitters the ground truth.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .csdmam import csdmam_forward, random_csdmam
from .diffconv import eeblock_forward, random_eeblock
from .metrics import Detection, EvalConfig, GroundTruth, evaluate, write_jsonl
from .pnm import write_pgm
from .reference import reference_map
from .spd import random_spdconv, spdconv_forward
from .synthgen import SceneSpec, generate_scene, resize_bilinear


def channel_mean_image(t) -> np.ndarray:
    """Per-channel mean of the first batch item, min-max scaled to [0, 1]."""
    m = np.asarray(t)[0].mean(axis=0)
    lo, hi = float(m.min()), float(m.max())
    return np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)


def dump_taps(taps: dict, out_dir, prefix: str = "") -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, t in taps.items():
        if not isinstance(t, np.ndarray) or t.ndim != 4 or t.shape[2] < 2:
            continue
        p = out / f"{prefix}{name}.pgm"
        write_pgm(p, channel_mean_image(t))
        paths.append(p)
    return paths


@dataclass
class BlockStack:
    eeblock: object
    spd: object
    csdmam: object

    @classmethod
    def random(cls, seed: int, width: int = 4, k: int = 31) -> "BlockStack":
        rng = np.random.default_rng([seed, 7])
        return cls(random_eeblock(rng, 3, width),
                   random_spdconv(rng, width, 2 * width),
                   random_csdmam(rng, 2 * width, k))

    def forward(self, x, taps: Optional[dict] = None) -> np.ndarray:
        a = eeblock_forward(x, self.eeblock)
        b = spdconv_forward(a, self.spd)
        inner = {} if taps is not None else None
        c = csdmam_forward(b, self.csdmam, taps=inner)
        if taps is not None:
            taps.update(eeblock=a, spdconv=b)
            taps.update({k: v for k, v in inner.items() if k in ("post_branch", "pre_merge", "output")})
        return c


def oracle_detections(gts, jitter: float, score_noise: float, seed: int) -> list:
    """Ground truth shifted by ``jitter`` box-sizes in a random direction and
    rescaled by exp(N(0, jitter / 2)); scores 0.9 + N(0, score_noise), clipped."""
    rng = np.random.default_rng([seed, 11])
    out = []
    for g in gts:
        cx, cy, w, h = g.box
        ang = rng.uniform(0, 2 * np.pi)
        mag = jitter * rng.uniform(0.5, 1.0) if jitter > 0 else 0.0
        sw, sh = (np.exp(rng.normal(0, jitter / 2, 2)) if jitter > 0 else (1.0, 1.0))
        box = (cx + mag * w * np.cos(ang), cy + mag * h * np.sin(ang), w * sw, h * sh)
        score = float(np.clip(0.9 + rng.normal(0, score_noise), 0.0, 1.0))
        out.append(Detection(g.image_id, g.class_id, box, score))
    return out


def run_pipeline(seed: int = 0, images: int = 2, jitter: float = 0.0, score_noise: float = 0.05,
                 out_dir=None, feature_size: int = 640, k: int = 31, reference: bool = True) -> dict:
    t0 = time.perf_counter()
    spec = SceneSpec(seed=seed)
    stack = BlockStack.random(seed, k=k)
    gts, shapes = [], {}
    for image_id in range(images):
        img, anns = generate_scene(spec, image_id)
        gts.extend(GroundTruth(a.image_id, a.class_id, a.box) for a in anns)
        x = img if feature_size == img.shape[-1] else resize_bilinear(img, feature_size, feature_size)
        taps = {}
        y = stack.forward(x, taps)
        if not np.isfinite(y).all():
            raise FloatingPointError(f"non-finite features on image {image_id}")
        shapes = {name: list(t.shape) for name, t in taps.items()}
        if out_dir is not None:
            dump_taps(taps, Path(out_dir) / "featmaps", prefix=f"{image_id:06d}_")
    dets = oracle_detections(gts, jitter, score_noise, seed)
    if out_dir is not None:
        # same files `sodkit eval` consumes
        write_jsonl(Path(out_dir) / "annotations.jsonl", gts)
        write_jsonl(Path(out_dir) / "predictions.jsonl", dets)
    report = evaluate(dets, gts, EvalConfig())
    result = {
        "seed": seed,
        "images": images,
        "jitter": jitter,
        "score_noise": score_noise,
        "feature_size": feature_size,
        "tap_shapes": shapes,
        "map50": report["map50"],
        "map50_95": report["map50_95"],
        "ap_small": report["ap_small"],
        "eval": report,
    }
    if reference:
        ref = reference_map(dets, gts, 0.5)
        result["reference_map50"] = ref
        result["reference_gap"] = abs(ref - report["map50"])
    result["seconds"] = time.perf_counter() - t0
    return result
