"""Brute-force reference evaluator.

Enumerates every valid one-to-one matching inside each (image, class)
group and keeps the one whose per-detection IoU sequence, read in score
order, is lexicographically largest (an unmatched detection counts as 0).
That is the optimum the greedy COCO rule is meant to reach; it is not the
maximum-cardinality matching, which can differ.

Groups are first split into connected components of the IoU >= threshold
graph so that crowded images stay tractable.
"""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from .loss import iou as box_iou

MAX_COMPONENT = 9


def _components(adj: np.ndarray):
    n_d, n_g = adj.shape
    seen_d, seen_g = set(), set()
    for start in range(n_d):
        if start in seen_d:
            continue
        ds, gs, stack = {start}, set(), [("d", start)]
        while stack:
            kind, i = stack.pop()
            if kind == "d":
                for j in np.flatnonzero(adj[i]):
                    if j not in gs:
                        gs.add(int(j))
                        stack.append(("g", int(j)))
            else:
                for k in np.flatnonzero(adj[:, i]):
                    if k not in ds:
                        ds.add(int(k))
                        stack.append(("d", int(k)))
        seen_d |= ds
        seen_g |= gs
        yield sorted(ds), sorted(gs)


def _best_assignment(ious: np.ndarray, order: list, thr: float):
    """Exhaustive search; returns {det: gt} maximizing the score-ordered IoU vector."""
    best_vec, best_map = None, {}

    def rec(k, used, vec, mapping):
        nonlocal best_vec, best_map
        if k == len(order):
            if best_vec is None or vec > best_vec:
                best_vec, best_map = list(vec), dict(mapping)
            return
        i = order[k]
        for j in range(ious.shape[1]):
            if j not in used and ious[i, j] >= thr:
                used.add(j)
                mapping[i] = j
                vec.append(ious[i, j])
                rec(k + 1, used, vec, mapping)
                vec.pop()
                del mapping[i]
                used.discard(j)
        vec.append(0.0)
        rec(k + 1, used, vec, mapping)
        vec.pop()

    rec(0, set(), [], {})
    return best_map


def exhaustive_flags(dets, gts, thr: float):
    """TP (1) / FP (0) per detection, input order, for one (image, class) group."""
    flags = np.zeros(len(dets), dtype=int)
    if not dets or not gts:
        return flags
    d = np.array([x.box for x in dets])
    g = np.array([x.box for x in gts])
    ious = np.asarray(box_iou(np.repeat(d, len(g), 0), np.tile(g, (len(d), 1)))).reshape(len(d), len(g))
    order_all = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    rank = {i: r for r, i in enumerate(order_all)}
    for ds, gs in _components(ious >= thr):
        if not gs:
            continue
        if len(ds) > MAX_COMPONENT:
            raise ValueError(f"component with {len(ds)} detections is too large to enumerate")
        sub = ious[np.ix_(ds, gs)]
        local_order = sorted(range(len(ds)), key=lambda k: rank[ds[k]])
        for k in _best_assignment(sub, local_order, thr):
            flags[ds[k]] = 1
    return flags


def reference_ap(dets, gts, thr: float, max_det: int = 300) -> float:
    """Single-class AP by exhaustive matching and a direct 101-point sum."""
    by_img = defaultdict(list)
    for x in dets:
        by_img[x.image_id].append(x)
    kept = []
    for group in by_img.values():
        kept.extend(sorted(group, key=lambda x: -x.score)[:max_det])
    g_img = defaultdict(list)
    for x in gts:
        g_img[x.image_id].append(x)
    scored = []
    for img in set(x.image_id for x in kept):
        group = [x for x in kept if x.image_id == img]
        for x, f in zip(group, exhaustive_flags(group, g_img.get(img, []), thr)):
            scored.append((x.score, f))
    n_gt = len(gts)
    if n_gt == 0 or not scored:
        return 0.0
    scored.sort(key=lambda s: -s[0])
    tp, points = 0, []
    for r, (_, f) in enumerate(scored, 1):
        tp += f
        points.append((tp / n_gt, tp / r))
    total = 0.0
    for k in range(101):
        level = k / 100
        total += max((p for rc, p in points if rc >= level), default=0.0)
    return total / 101


def reference_map(dets, gts, thr: float, max_det: int = 300) -> float:
    """Mean over classes with ground truth. ``max_det`` applies per image across classes."""
    by_img = defaultdict(list)
    for x in dets:
        by_img[x.image_id].append(x)
    kept = [x for g in by_img.values() for x in sorted(g, key=lambda x: -x.score)[:max_det]]
    classes = sorted(set(g.class_id for g in gts))
    aps = [reference_ap([x for x in kept if x.class_id == c], [g for g in gts if g.class_id == c],
                        thr, max_det) for c in classes]
    return float(np.mean(aps)) if aps else 0.0
