"""Teacher proposals to class-agnostic pseudo-annotations, and the labeled + pseudo merge."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, TypeVar

import numpy as np

from .datamodel import (
    Annotation,
    ClassSplit,
    Dataset,
    DatasetError,
    ImageRecord,
    Modality,
    Source,
    agnostic_category,
)
from .geometry import BBox, clamp_to_image

log = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class Proposal:
    image_id: int
    modality: Modality
    bbox: BBox
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"proposal score {self.score} outside [0, 1]")


@dataclass(frozen=True, slots=True)
class PseudoLabelConfig:
    score_threshold: float = 0.7
    nms_iou: float = 0.5
    max_per_image: int = 100

    def __post_init__(self) -> None:
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must lie in [0, 1]")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError("nms_iou must lie in (0, 1]")
        if self.max_per_image <= 0:
            raise ValueError("max_per_image must be positive")


def filter_proposals(props: Iterable[Proposal], tau: float) -> list[Proposal]:
    return [p for p in props if p.score >= tau]


T = TypeVar("T")


def _pairwise_iou(boxes: np.ndarray) -> np.ndarray:
    x1, y1, x2, y2 = boxes.T
    iw = np.clip(np.minimum(x2[:, None], x2[None]) - np.maximum(x1[:, None], x1[None]), 0, None)
    ih = np.clip(np.minimum(y2[:, None], y2[None]) - np.maximum(y1[:, None], y1[None]), 0, None)
    inter = iw * ih
    areas = (x2 - x1) * (y2 - y1)
    return inter / (areas[:, None] + areas[None] - inter)


def nms(dets: Sequence[T], iou_thresh: float) -> list[T]:
    """Greedy suppression over items with ``.bbox`` and ``.score``.

    Kept items come back by descending score, ties by input position. A box
    is suppressed when its IoU with a kept box strictly exceeds the threshold.
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    boxes = np.array([dets[i].bbox.as_tuple() for i in order])
    ious = _pairwise_iou(boxes)
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for k in range(len(order)):
        if not alive[k]:
            continue
        kept.append(dets[order[k]])
        alive &= ~(ious[k] > iou_thresh)
    return kept


def generate_pseudo_records(
    props: Iterable[Proposal],
    cfg: PseudoLabelConfig,
    split: ClassSplit,
    *,
    images: Iterable[ImageRecord] | None = None,
    start_id: int = 1,
) -> list[Annotation]:
    """Filter, suppress and cap teacher proposals per image; emit agnostic pseudo-annotations.

    Proposals on RGB images are rejected (with a logged warning). When
    ``images`` is given, modalities are checked against it and boxes are
    clamped to the image extent.
    """
    image_map = {im.id: im for im in images} if images is not None else None
    per_image: dict[int, list[Proposal]] = defaultdict(list)
    rejected = 0
    for p in filter_proposals(props, cfg.score_threshold):
        modality = p.modality
        if image_map is not None:
            if p.image_id not in image_map:
                raise DatasetError(f"proposal references missing image id {p.image_id}", ids=[p.image_id])
            modality = image_map[p.image_id].modality
            if modality != p.modality:
                raise DatasetError(
                    f"proposal modality {p.modality.value} disagrees with image {p.image_id} "
                    f"({modality.value})",
                    ids=[p.image_id],
                )
        if modality == Modality.RGB:
            rejected += 1
            continue
        per_image[p.image_id].append(p)
    if rejected:
        log.warning("rejected %d proposal(s) on RGB images", rejected)

    out = []
    next_id = start_id
    for image_id in sorted(per_image):
        kept = nms(per_image[image_id], cfg.nms_iou)[: cfg.max_per_image]
        for p in kept:
            box = p.bbox
            if image_map is not None:
                im = image_map[image_id]
                box = clamp_to_image(box, im.width, im.height)
                if box is None:
                    continue
            out.append(Annotation(next_id, image_id, split.agnostic_id, box, is_pseudo=True))
            next_id += 1
    return out


def labels_from_rgb(labeled: Dataset, geo_images: Iterable[ImageRecord], *, start_id: int = 1) -> list[Annotation]:
    """Alternative Stage III: copy each parent RGB image's annotations onto its depth/normal view."""
    by_image = labeled.annotations_by_image()
    out = []
    next_id = start_id
    for im in sorted(geo_images, key=lambda r: r.id):
        if im.parent_id is None:
            raise DatasetError(f"image {im.id} has no parent RGB image id", ids=[im.id])
        if im.parent_id not in by_image:
            raise DatasetError(f"image {im.id}: parent {im.parent_id} not in labeled set", ids=[im.parent_id])
        for a in sorted(by_image[im.parent_id], key=lambda a: a.id):
            out.append(replace(a, id=next_id, image_id=im.id, is_pseudo=True))
            next_id += 1
    return out


def merge_datasets(
    labeled: Dataset,
    pseudo_sets: Sequence[tuple[Sequence[ImageRecord], Sequence[Annotation]]],
    split: ClassSplit | None = None,
) -> Dataset:
    """Union of the labeled set with pseudo-labeled image sets.

    Image and annotation ids must be globally unique. Pseudo images are marked
    ``source=pseudo``. If ``split`` is given, its agnostic category is added
    when missing. Output is sorted by image id, then annotation id.
    """
    images = list(labeled.images)
    anns = list(labeled.annotations)
    seen_images = {im.id for im in images}
    seen_anns = {a.id for a in anns}
    for set_images, set_anns in pseudo_sets:
        for im in set_images:
            if im.id in seen_images:
                raise DatasetError(f"image id collision while merging: {im.id}", ids=[im.id])
            seen_images.add(im.id)
            images.append(im if im.source == Source.PSEUDO else replace(im, source=Source.PSEUDO))
        for a in set_anns:
            if a.id in seen_anns:
                raise DatasetError(f"annotation id collision while merging: {a.id}", ids=[a.id])
            seen_anns.add(a.id)
            anns.append(a)
    cats = labeled.categories
    if split is not None and all(c.id != split.agnostic_id for c in cats):
        cats = cats + (agnostic_category(split),)
    if not pseudo_sets and cats == labeled.categories:
        return labeled
    merged = Dataset(
        tuple(sorted(images, key=lambda im: im.id)),
        tuple(sorted(anns, key=lambda a: (a.image_id, a.id))),
        cats,
    )
    merged.validate()
    return merged


# -- proposal file ---------------------------------------------------------


def proposal_to_record(p: Proposal) -> dict[str, Any]:
    return {
        "image_id": p.image_id,
        "modality": p.modality.value,
        "bbox": list(p.bbox.to_xywh()),
        "score": p.score,
    }


def parse_proposal_line(line: str, lineno: int = 0) -> Proposal:
    try:
        rec = json.loads(line)
        return Proposal(
            image_id=int(rec["image_id"]),
            modality=Modality(rec["modality"]),
            bbox=BBox.from_xywh(*rec["bbox"]),
            score=float(rec["score"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"proposal line {lineno}: {exc}") from None


def read_proposals(path: str | Path) -> list[Proposal]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                out.append(parse_proposal_line(line, lineno))
    return out


def write_jsonl(records: Iterable[dict[str, Any]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
