"""Class-agnostic open-world detection metrics.

Matching and accumulation follow the COCO conventions: greedy matching per
image and category in descending score order, IoU thresholds 0.50:0.05:0.95,
101-point interpolated precision, at most 100 detections per image and
category. Ground truth can be marked *ignore*: detections that only hit an
ignored box count as neither true nor false positives.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from collections.abc import Collection, Iterable, Sequence
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Any

import numpy as np

from .datamodel import Annotation, ClassSplit, Dataset, DatasetError
from .geometry import BBox


@dataclass(frozen=True, slots=True)
class Detection:
    image_id: int
    category_id: int
    bbox: BBox
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


def coco_iou_thresholds() -> tuple[float, ...]:
    return tuple(float(t) for t in np.linspace(0.5, 0.95, 10))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = field(default_factory=coco_iou_thresholds)
    max_dets: int | None = 100  # None: no cap
    recall_points: int = 101

    def __post_init__(self) -> None:
        ts = tuple(float(t) for t in self.iou_thresholds)
        if not ts or any(not 0.0 < t <= 1.0 for t in ts):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("IoU thresholds must be strictly increasing")
        if self.max_dets is not None and self.max_dets <= 0:
            raise ValueError("max_dets must be positive")
        object.__setattr__(self, "iou_thresholds", ts)

    def recall_thresholds(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.recall_points)


class Outcome(IntEnum):
    FP = 0
    TP = 1
    IGNORED = -1


@dataclass
class EvalResult:
    ar_agnostic_corner: float
    ar_agnostic: float
    ap_agnostic: float
    ap_common: float
    per_class: dict[int, tuple[float, float]] = field(default_factory=dict)

    def metrics(self) -> tuple[float, float, float, float]:
        return (self.ar_agnostic_corner, self.ar_agnostic, self.ap_agnostic, self.ap_common)

    def to_doc(self) -> dict[str, Any]:
        return {
            "ar_agnostic_corner": _num(self.ar_agnostic_corner),
            "ar_agnostic": _num(self.ar_agnostic),
            "ap_agnostic": _num(self.ap_agnostic),
            "ap_common": _num(self.ap_common),
            "per_class": {
                str(cid): {"ap": _num(ap), "ar": _num(ar)} for cid, (ap, ar) in sorted(self.per_class.items())
            },
        }


def _num(x: float) -> float | None:
    return None if math.isnan(x) else float(x)


def _iou_matrix(dets: Sequence[BBox], gts: Sequence[BBox]) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    d = np.array([b.as_tuple() for b in dets])
    g = np.array([b.as_tuple() for b in gts])
    iw = np.minimum(d[:, None, 2], g[None, :, 2]) - np.maximum(d[:, None, 0], g[None, :, 0])
    ih = np.minimum(d[:, None, 3], g[None, :, 3]) - np.maximum(d[:, None, 1], g[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    da = (d[:, 2] - d[:, 0]) * (d[:, 3] - d[:, 1])
    ga = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    return inter / (da[:, None] + ga[None, :] - inter)


def _greedy(ious: np.ndarray, same_cat: np.ndarray, ignored: np.ndarray, iou_t: float) -> list[Outcome]:
    """Match score-sorted detections (rows) to ground truth (columns) at one threshold."""
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    out = []
    for d in range(n_det):
        best, best_iou = -1, -1.0
        for g in range(n_gt):
            if ignored[g] or taken[g] or not same_cat[d, g]:
                continue
            if ious[d, g] >= iou_t and ious[d, g] > best_iou:
                best, best_iou = g, ious[d, g]
        if best >= 0:
            taken[best] = True
            out.append(Outcome.TP)
        elif n_gt and np.any(ignored & (ious[d] >= iou_t)):
            out.append(Outcome.IGNORED)
        else:
            out.append(Outcome.FP)
    return out


def _sort_by_score(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.score)


def match_for_eval(
    dets: Sequence[Detection],
    gts: Sequence[Annotation],
    iou_t: float,
    ignore: Collection[int] = frozenset(),
) -> list[Outcome]:
    """Label each detection of one image TP / FP / IGNORED.

    ``dets`` must already be in descending score order. A detection matches
    the unmatched, non-ignored ground truth of its own category with the
    highest IoU >= ``iou_t``. Failing that, if it overlaps any ignored box
    (regardless of category) at >= ``iou_t`` it is IGNORED, otherwise FP.
    """
    ious = _iou_matrix([d.bbox for d in dets], [g.bbox for g in gts])
    same = np.array([[d.category_id == g.category_id for g in gts] for d in dets], dtype=bool).reshape(
        len(dets), len(gts)
    )
    ignored = np.array([g.id in ignore for g in gts], dtype=bool)
    return _greedy(ious, same, ignored, iou_t)


@dataclass
class _ClassCurves:
    npos: int
    scores: list[float] = field(default_factory=list)
    # one outcome list per IoU threshold, aligned with ``scores``
    outcomes: list[list[Outcome]] = field(default_factory=list)


def _accumulate(
    dets: Iterable[Detection],
    gts: Iterable[Annotation],
    thresholds: Sequence[float],
    max_dets: int | None,
    ignore: Collection[int],
) -> dict[int, _ClassCurves]:
    """Per-category score/outcome lists over all images, for each threshold."""
    gts = list(gts)
    dets_by = defaultdict(list)
    for d in dets:
        dets_by[(d.image_id, d.category_id)].append(d)
    gts_by_image = defaultdict(list)
    for g in gts:
        gts_by_image[g.image_id].append(g)

    npos: dict[int, int] = defaultdict(int)
    for g in gts:
        if g.id not in ignore:
            npos[g.category_id] += 1
    curves = {cid: _ClassCurves(n, outcomes=[[] for _ in thresholds]) for cid, n in npos.items()}

    for (image_id, cid), ds in sorted(dets_by.items()):
        if cid not in curves:
            continue
        ds = _sort_by_score(ds)
        if max_dets is not None:
            ds = ds[:max_dets]
        # own-category boxes plus every ignore region in the image
        cand = [g for g in gts_by_image.get(image_id, []) if g.category_id == cid or g.id in ignore]
        ious = _iou_matrix([d.bbox for d in ds], [g.bbox for g in cand])
        same = np.array([g.category_id == cid for g in cand], dtype=bool)[None, :].repeat(len(ds), 0)
        ignored = np.array([g.id in ignore for g in cand], dtype=bool)
        c = curves[cid]
        c.scores.extend(d.score for d in ds)
        for k, t in enumerate(thresholds):
            c.outcomes[k].extend(_greedy(ious, same, ignored, t))
    return curves


def _curve_ap(scores: Sequence[float], outcomes: Sequence[Outcome], npos: int, rec_thrs: np.ndarray) -> float:
    order = np.argsort(-np.asarray(scores, dtype=float), kind="mergesort")
    flags = np.asarray(outcomes, dtype=int)[order] if len(outcomes) else np.zeros(0, dtype=int)
    flags = flags[flags != Outcome.IGNORED]
    tp = np.cumsum(flags == Outcome.TP)
    fp = np.cumsum(flags == Outcome.FP)
    if tp.size == 0:
        return 0.0
    recall = tp / npos
    precision = tp / (tp + fp)
    for i in range(precision.size - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]
    idx = np.searchsorted(recall, rec_thrs, side="left")
    q = np.zeros(rec_thrs.size)
    ok = idx < recall.size
    q[ok] = precision[idx[ok]]
    return float(q.mean())


def _curve_recall(outcomes: Sequence[Outcome], npos: int) -> float:
    return sum(1 for o in outcomes if o == Outcome.TP) / npos


def _nanmean(vals: Sequence[float]) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def per_class_ap(
    dets: Iterable[Detection],
    gts: Iterable[Annotation],
    cfg: EvalConfig = EvalConfig(),
    ignore: Collection[int] = frozenset(),
) -> dict[int, tuple[float, float]]:
    """``{category: (AP, AR)}`` averaged over ``cfg.iou_thresholds``; classes without ground truth are absent."""
    curves = _accumulate(dets, gts, cfg.iou_thresholds, cfg.max_dets, ignore)
    rec_thrs = cfg.recall_thresholds()
    out = {}
    for cid, c in sorted(curves.items()):
        ap = np.mean([_curve_ap(c.scores, o, c.npos, rec_thrs) for o in c.outcomes])
        ar = np.mean([_curve_recall(o, c.npos) for o in c.outcomes])
        out[cid] = (float(ap), float(ar))
    return out


def average_precision(
    dets: Iterable[Detection],
    gts: Iterable[Annotation],
    iou_t: float,
    cfg: EvalConfig = EvalConfig(),
    ignore: Collection[int] = frozenset(),
) -> float:
    """Class-mean 101-point interpolated AP at one IoU threshold; NaN when no class has ground truth."""
    single = replace(cfg, iou_thresholds=(iou_t,))
    return _nanmean([ap for ap, _ in per_class_ap(dets, gts, single, ignore).values()])


def mean_average_precision(
    dets: Iterable[Detection],
    gts: Iterable[Annotation],
    cfg: EvalConfig = EvalConfig(),
    ignore: Collection[int] = frozenset(),
) -> float:
    return _nanmean([ap for ap, _ in per_class_ap(dets, gts, cfg, ignore).values()])


def average_recall(
    dets: Iterable[Detection],
    gts: Iterable[Annotation],
    cfg: EvalConfig = EvalConfig(),
    ignore: Collection[int] = frozenset(),
) -> float:
    return _nanmean([ar for _, ar in per_class_ap(dets, gts, cfg, ignore).values()])


def _check_detections(dets: Sequence[Detection], ds: Dataset, extra_cats: Collection[int] = ()) -> None:
    images = {im.id for im in ds.images}
    cats = {c.id for c in ds.categories} | set(extra_cats)
    for d in dets:
        if d.image_id not in images:
            raise DatasetError(f"detection references missing image id {d.image_id}", ids=[d.image_id])
        if d.category_id not in cats:
            raise DatasetError(f"detection references unknown category id {d.category_id}", ids=[d.category_id])


def _to_agnostic_dets(dets: Iterable[Detection], agnostic_id: int) -> list[Detection]:
    return [replace(d, category_id=agnostic_id) for d in dets]


def _to_agnostic_gts(gts: Iterable[Annotation], agnostic_id: int) -> list[Annotation]:
    return [replace(g, category_id=agnostic_id) for g in gts]


def evaluate_coda(
    dets: Sequence[Detection], ds: Dataset, split: ClassSplit, cfg: EvalConfig = EvalConfig()
) -> EvalResult:
    """The four corner-case metrics plus a per-class (AP, AR) breakdown.

    Corner-case ground truth is every box whose original category is novel.
    Common classes are scored class-aware with novel boxes as ignore regions;
    each novel class in ``per_class`` is scored agnostically against the
    other boxes as ignore regions.
    """
    _check_detections(dets, ds, {split.agnostic_id})
    gts = [replace(g, category_id=g.source_category_id) for g in ds.annotations]
    novel_gt = frozenset(g.id for g in gts if g.category_id in split.novel_ids)
    common_gt = frozenset(g.id for g in gts if g.category_id not in split.novel_ids)

    agn_dets = _to_agnostic_dets(dets, split.agnostic_id)
    agn_gts = _to_agnostic_gts(gts, split.agnostic_id)

    agnostic = per_class_ap(agn_dets, agn_gts, cfg)
    ap_agnostic, ar_agnostic = agnostic.get(split.agnostic_id, (math.nan, math.nan))
    ar_corner = average_recall(agn_dets, agn_gts, cfg, ignore=common_gt)

    common_dets = [d for d in dets if d.category_id in split.common_ids]
    common = per_class_ap(common_dets, gts, cfg, ignore=novel_gt)
    ap_common = _nanmean([ap for ap, _ in common.values()])

    per_class = dict(common)
    for cid in sorted(split.novel_ids):
        own = frozenset(g.id for g in gts if g.category_id == cid)
        if not own:
            continue
        res = per_class_ap(agn_dets, agn_gts, cfg, ignore=frozenset(g.id for g in gts) - own)
        per_class[cid] = res[split.agnostic_id]
    return EvalResult(ar_corner, ar_agnostic, ap_agnostic, ap_common, dict(sorted(per_class.items())))


def evaluate_common(
    dets: Sequence[Detection], ds: Dataset, cfg: EvalConfig = EvalConfig(), *, split: ClassSplit | None = None
) -> tuple[float, float]:
    """Class-averaged (recall, AP) at IoU 0.5, class-aware.

    With a ``split``, only common classes are scored: detections labeled with
    the agnostic id are dropped and novel-class boxes act as ignore regions.
    """
    gts = list(ds.annotations)
    ignore: frozenset[int] = frozenset()
    if split is not None:
        _check_detections(dets, ds, {split.agnostic_id})
        dets = [d for d in dets if d.category_id in split.common_ids]
        gts = [replace(g, category_id=g.source_category_id) for g in gts]
        ignore = frozenset(g.id for g in gts if g.category_id not in split.common_ids)
    else:
        _check_detections(dets, ds)
    single = replace(cfg, iou_thresholds=(0.5,))
    res = per_class_ap(dets, gts, single, ignore)
    recall = _nanmean([ar for _, ar in res.values()])
    ap50 = _nanmean([ap for ap, _ in res.values()])
    return recall, ap50


# -- detection file --------------------------------------------------------


def detection_to_record(d: Detection) -> dict[str, Any]:
    return {
        "image_id": d.image_id,
        "category_id": d.category_id,
        "bbox": list(d.bbox.to_xywh()),
        "score": d.score,
    }


def read_detections(path: str | Path) -> list[Detection]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    Detection(
                        int(rec["image_id"]),
                        int(rec["category_id"]),
                        BBox.from_xywh(*rec["bbox"]),
                        float(rec["score"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: detection line {lineno}: {exc}") from None
    return out
