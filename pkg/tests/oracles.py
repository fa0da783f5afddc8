"""Brute-force reference implementations used as test oracles.

Nothing here imports the code under test except plain record types, so each
oracle is an independent route to the same numbers.
"""

from __future__ import annotations

import itertools
from collections import defaultdict

import numpy as np


def ref_iou(a, b) -> float:
    """IoU of two ``(x1, y1, x2, y2)`` tuples, written out longhand."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    w = min(ax2, bx2) - max(ax1, bx1)
    h = min(ay2, by2) - max(ay1, by1)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def brute_force_assignment(cost: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Minimum cost over all injective assignments, and the lexicographically
    smallest sorted pair list attaining it (exact comparison)."""
    rows, cols = cost.shape
    if rows == 0 or cols == 0:
        return 0.0, []
    best = None
    best_pairs = None
    if rows <= cols:
        for perm in itertools.permutations(range(cols), rows):
            pairs = [(i, perm[i]) for i in range(rows)]
            total = sum(cost[i, j] for i, j in pairs)
            if best is None or total < best or (total == best and pairs < best_pairs):
                best, best_pairs = total, pairs
    else:
        for perm in itertools.permutations(range(rows), cols):
            pairs = sorted((perm[j], j) for j in range(cols))
            total = sum(cost[i, j] for i, j in pairs)
            if best is None or total < best or (total == best and pairs < best_pairs):
                best, best_pairs = total, pairs
    return float(best), best_pairs


def brute_force_min_cost(cost: np.ndarray) -> float:
    """Vectorized minimum over all injections (no tie-break bookkeeping)."""
    rows, cols = cost.shape
    if rows == 0 or cols == 0:
        return 0.0
    c = cost if rows <= cols else cost.T
    r, k = c.shape
    perms = np.array(list(itertools.permutations(range(k), r)))
    return float(c[np.arange(r), perms].sum(axis=1).min())


def greedy_nms_reference(items, thresh):
    """Textbook greedy NMS: repeatedly take the best remaining, drop its overlaps."""
    remaining = sorted(range(len(items)), key=lambda i: (-items[i][1], i))
    kept = []
    while remaining:
        top = remaining.pop(0)
        kept.append(top)
        remaining = [i for i in remaining if ref_iou(items[top][0], items[i][0]) <= thresh]
    return kept


# -- detection metrics -------------------------------------------------------
#
# A "scene" is a list of gts ``(gid, image, cat, box, ignored)`` and dets
# ``(image, cat, box, score)``; scores are distinct so ranking is unique.


def ref_match(dets, gts, iou_t):
    """Outcome per detection ('tp', 'fp', 'ign') for one image and category.

    ``dets`` in descending score order; ``gts`` holds same-category boxes plus
    all ignore regions.
    """
    used = set()
    out = []
    for _, cat, box, _ in dets:
        choice, choice_iou = None, None
        for gid, _, gcat, gbox, ign in gts:
            if ign or gid in used or gcat != cat:
                continue
            v = ref_iou(box, gbox)
            if v >= iou_t and (choice is None or v > choice_iou):
                choice, choice_iou = gid, v
        if choice is not None:
            used.add(choice)
            out.append("tp")
        elif any(ign and ref_iou(box, gbox) >= iou_t for _, _, _, gbox, ign in gts):
            out.append("ign")
        else:
            out.append("fp")
    return out


def _class_outcomes(dets, gts, cat, iou_t, max_dets):
    ranked = []
    for image in sorted({d[0] for d in dets if d[1] == cat}):
        mine = sorted((d for d in dets if d[0] == image and d[1] == cat), key=lambda d: -d[3])
        if max_dets is not None:
            mine = mine[:max_dets]
        cand = [g for g in gts if g[1] == image and (g[2] == cat or g[4])]
        ranked.extend(zip([d[3] for d in mine], ref_match(mine, cand, iou_t)))
    ranked.sort(key=lambda t: -t[0])
    return [o for _, o in ranked]


def ref_ap_at(dets, gts, cat, iou_t, max_dets=100, points=101):
    npos = sum(1 for g in gts if g[2] == cat and not g[4])
    outcomes = [o for o in _class_outcomes(dets, gts, cat, iou_t, max_dets) if o != "ign"]
    curve = []
    tp = fp = 0
    for o in outcomes:
        tp += o == "tp"
        fp += o == "fp"
        curve.append((tp / npos, tp / (tp + fp)))
    total = 0.0
    for r in np.linspace(0.0, 1.0, points):
        eligible = [p for rec, p in curve if rec >= r]
        total += max(eligible) if eligible else 0.0
    return total / points


def ref_recall_at(dets, gts, cat, iou_t, max_dets=100):
    npos = sum(1 for g in gts if g[2] == cat and not g[4])
    return sum(o == "tp" for o in _class_outcomes(dets, gts, cat, iou_t, max_dets)) / npos


def _classes_with_gt(gts):
    counts = defaultdict(int)
    for g in gts:
        if not g[4]:
            counts[g[2]] += 1
    return sorted(counts)


def ref_average_precision(dets, gts, iou_t, max_dets=100):
    cats = _classes_with_gt(gts)
    if not cats:
        return float("nan")
    return float(np.mean([ref_ap_at(dets, gts, c, iou_t, max_dets) for c in cats]))


def ref_average_recall(dets, gts, thresholds, max_dets=100):
    cats = _classes_with_gt(gts)
    if not cats:
        return float("nan")
    return float(np.mean([np.mean([ref_recall_at(dets, gts, c, t, max_dets) for t in thresholds]) for c in cats]))
