"""COCO-protocol detection metrics.

Matching is the COCO greedy rule: within one (image, class) group,
detections are visited in descending score order and each claims the
unmatched ground truth with the highest IoU at or above the threshold.
AP uses 101-point interpolation of the precision envelope.

Size buckets follow COCO's ignore rule: ground truths outside the bucket
are ignored, detections matched to them are neither TP nor FP, and
unmatched detections whose own area is outside the bucket are ignored too.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError
from .loss import iou as box_iou

SMALL_MAX_AREA = 32.0 ** 2
MEDIUM_MAX_AREA = 96.0 ** 2
SIZE_BUCKETS = {
    "all": (0.0, float("inf")),
    "small": (0.0, SMALL_MAX_AREA),
    "medium": (SMALL_MAX_AREA, MEDIUM_MAX_AREA),
    "large": (MEDIUM_MAX_AREA, float("inf")),
}
COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

TP, FP, IGNORED = 1, 0, -1


def size_bucket(area: float) -> str:
    if area < SMALL_MAX_AREA:
        return "small"
    if area < MEDIUM_MAX_AREA:
        return "medium"
    return "large"


@dataclass(frozen=True)
class Detection:
    image_id: object
    class_id: int
    box: tuple
    score: float

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ContractError(f"score must be finite and in [0, 1], got {self.score}")
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))

    @property
    def area(self) -> float:
        return self.box[2] * self.box[3]


@dataclass(frozen=True)
class GroundTruth:
    image_id: object
    class_id: int
    box: tuple
    area: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        if self.area is None:
            object.__setattr__(self, "area", self.box[2] * self.box[3])
        if not self.area > 0:
            raise ContractError("ground-truth area must be > 0")


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = COCO_THRESHOLDS
    max_detections: int = 300
    score_cut: float = 0.5
    pr_iou: float = 0.5

    def __post_init__(self):
        thr = tuple(float(t) for t in self.iou_thresholds)
        if not thr or any(not 0 < t <= 1 for t in thr) or any(b <= a for a, b in zip(thr, thr[1:])):
            raise ContractError("IoU thresholds must be strictly increasing in (0, 1]")
        object.__setattr__(self, "iou_thresholds", thr)
        if self.max_detections < 1:
            raise ContractError("max_detections must be >= 1")


@dataclass
class PRCurve:
    recall: np.ndarray = field(default_factory=lambda: np.zeros(0))
    precision: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _iou_matrix(dets: Sequence[Detection], gts: Sequence[GroundTruth]) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    d = np.array([x.box for x in dets])
    g = np.array([x.box for x in gts])
    pairs_d = np.repeat(d, len(g), axis=0)
    pairs_g = np.tile(g, (len(d), 1))
    return np.asarray(box_iou(pairs_d, pairs_g)).reshape(len(dets), len(gts))


def _score_order(dets: Sequence[Detection]) -> list:
    # stable: equal scores keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_group(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float,
                area_range=(0.0, float("inf"))):
    """Greedy COCO matching inside one (image, class) group.

    Returns (flags, n_gt) where ``flags[i]`` is TP, FP or IGNORED for
    ``dets[i]`` (input order) and ``n_gt`` counts non-ignored ground truths.
    """
    lo, hi = area_range
    gt_ignore = np.array([not (lo <= g.area < hi) for g in gts], dtype=bool)
    # non-ignored ground truths first, as in COCO
    gt_order = sorted(range(len(gts)), key=lambda j: gt_ignore[j])
    ious = _iou_matrix(dets, gts)
    flags = np.full(len(dets), FP, dtype=int)
    taken = np.zeros(len(gts), dtype=bool)
    for i in _score_order(dets):
        best, best_j = iou_thr, -1
        for j in gt_order:
            if taken[j]:
                continue
            if best_j >= 0 and not gt_ignore[best_j] and gt_ignore[j]:
                break
            if ious[i, j] < best:
                continue
            best, best_j = ious[i, j], j
        if best_j >= 0:
            taken[best_j] = True
            flags[i] = IGNORED if gt_ignore[best_j] else TP
        elif not (lo <= dets[i].area < hi):
            flags[i] = IGNORED
    return flags, int((~gt_ignore).sum())


def truncate_per_image(dets: Iterable[Detection], max_det: int) -> list:
    by_image = defaultdict(list)
    for d in dets:
        by_image[d.image_id].append(d)
    kept = []
    for group in by_image.values():
        kept.extend(group[i] for i in _score_order(group)[:max_det])
    return kept


def _group(items, key=lambda x: (x.image_id, x.class_id)):
    out = defaultdict(list)
    for it in items:
        out[key(it)].append(it)
    return out


@dataclass
class MatchResult:
    detections: list
    flags: np.ndarray
    false_negatives: int
    total_gt: int


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float,
                     max_det: int = 300, area_range=(0.0, float("inf"))) -> MatchResult:
    """Match every (image, class) group; detections come back in global score order."""
    kept = truncate_per_image(dets, max_det)
    d_groups, g_groups = _group(kept), _group(gts)
    out_dets, out_flags = [], []
    total_gt = tp = 0
    for key in set(d_groups) | set(g_groups):
        gd, gg = d_groups.get(key, []), g_groups.get(key, [])
        flags, n_gt = match_group(gd, gg, iou_thr, area_range)
        total_gt += n_gt
        tp += int((flags == TP).sum())
        out_dets.extend(gd)
        out_flags.extend(flags)
    order = _score_order(out_dets)
    return MatchResult([out_dets[i] for i in order], np.array([out_flags[i] for i in order], dtype=int),
                       total_gt - tp, total_gt)


def pr_curve(flags: Sequence[int], total_gt: int) -> PRCurve:
    """Cumulative precision/recall over score-ordered flags (ignored entries dropped)."""
    f = np.asarray(flags, dtype=int)
    f = f[f != IGNORED]
    if f.size == 0 or total_gt == 0:
        return PRCurve()
    tp = np.cumsum(f == TP)
    rank = np.arange(1, f.size + 1)
    return PRCurve(tp / total_gt, tp / rank)


def average_precision(curve: PRCurve) -> float:
    """101-point interpolated AP."""
    rc, pr = np.asarray(curve.recall, float), np.asarray(curve.precision, float)
    if rc.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(pr[::-1])[::-1]
    idx = np.searchsorted(rc, RECALL_POINTS, side="left")
    sampled = np.where(idx < rc.size, envelope[np.minimum(idx, rc.size - 1)], 0.0)
    return float(sampled.mean())


def _class_ap(dets, gts, thr, cfg, area_range):
    m = match_detections(dets, gts, thr, cfg.max_detections, area_range)
    return average_precision(pr_curve(m.flags, m.total_gt)), m.total_gt


def _mean(values):
    return float(np.mean(values)) if values else None


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruth],
             cfg: EvalConfig = EvalConfig()) -> dict:
    # max_det is a per-image budget over all classes
    dets = truncate_per_image(dets, cfg.max_detections)
    det_by_class = _group(dets, key=lambda d: d.class_id)
    gt_by_class = _group(gts, key=lambda g: g.class_id)
    classes = sorted(set(det_by_class) | set(gt_by_class))
    no_gt = [c for c in classes if c not in gt_by_class]

    per_class = {}
    per_threshold = {}
    bucket_ap = {}
    for bucket, rng_ in SIZE_BUCKETS.items():
        table = {}
        for c in classes:
            if c in no_gt:
                continue
            row = {}
            for thr in cfg.iou_thresholds:
                ap, n_gt = _class_ap(det_by_class.get(c, []), gt_by_class[c], thr, cfg, rng_)
                row[thr] = ap if n_gt > 0 else None
            table[c] = row
        if bucket == "all":
            for thr in cfg.iou_thresholds:
                per_threshold[thr] = _mean([table[c][thr] for c in table])
            per_class = {c: {f"{t:.2f}": v for t, v in row.items()} for c, row in table.items()}
        bucket_ap[bucket] = _mean([
            np.mean([v for v in row.values()]) for row in table.values()
            if all(v is not None for v in row.values())
        ])

    # P/R at the score cut, micro-averaged over classes with ground truth
    cut = [d for d in dets if d.score >= cfg.score_cut]
    m = match_detections(cut, gts, cfg.pr_iou, cfg.max_detections)
    tp = int((m.flags == TP).sum())
    fp = int((m.flags == FP).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / m.total_gt if m.total_gt else 0.0

    thr_keys = {f"{t:.2f}": v for t, v in per_threshold.items()}
    report = {
        "per_class_ap": {str(c): v for c, v in per_class.items()},
        "map_per_threshold": thr_keys,
        "map50": per_threshold.get(0.5),
        "map50_95": (_mean([v for v in per_threshold.values() if v is not None])
                     if set(COCO_THRESHOLDS) <= set(per_threshold) else None),
        "ap_small": bucket_ap["small"],
        "ap_medium": bucket_ap["medium"],
        "ap_large": bucket_ap["large"],
        "precision": precision,
        "recall": recall,
        "score_cut": cfg.score_cut,
        "classes_without_gt": no_gt,
        "max_detections": cfg.max_detections,
        "num_detections": len(dets),
        "num_ground_truths": len(gts),
    }
    return report


def format_table(report: dict) -> str:
    fmt = lambda v: "   -  " if v is None else f"{v:6.4f}"
    lines = [f"{'metric':<14}{'value':>8}"]
    for key in ("map50", "map50_95", "ap_small", "ap_medium", "ap_large", "precision", "recall"):
        lines.append(f"{key:<14}{fmt(report.get(key)):>8}")
    for thr, v in report["map_per_threshold"].items():
        lines.append(f"{'mAP@' + thr:<14}{fmt(v):>8}")
    lines.append("per-class AP@0.50:")
    for c, row in report["per_class_ap"].items():
        lines.append(f"  class {c:<6}{fmt(row.get('0.50')):>8}")
    if report["classes_without_gt"]:
        lines.append(f"classes without ground truth: {report['classes_without_gt']}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# JSON-lines I/O


def _box(rec):
    return rec["cx"], rec["cy"], rec["w"], rec["h"]


def read_jsonl(path) -> list:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ContractError(f"{path}:{n}: {e}") from None
    return out


def load_ground_truth(path) -> list:
    return [GroundTruth(r["image_id"], int(r["class_id"]), _box(r), r.get("area"))
            for r in read_jsonl(path)]


def load_detections(path) -> list:
    recs = read_jsonl(path)
    missing = [i for i, r in enumerate(recs) if "score" not in r]
    if missing:
        raise ContractError(f"{path}: prediction records need a score (line {missing[0] + 1})")
    return [Detection(r["image_id"], int(r["class_id"]), _box(r), float(r["score"])) for r in recs]


def write_jsonl(path, records: Iterable) -> None:
    with open(path, "w") as fh:
        for r in records:
            rec = {"image_id": r.image_id, "class_id": r.class_id,
                   "cx": r.box[0], "cy": r.box[1], "w": r.box[2], "h": r.box[3]}
            if isinstance(r, Detection):
                rec["score"] = r.score
            fh.write(json.dumps(rec) + "\n")
