"""Deterministic synthetic scenes and simulated detectors.

Randomness comes from numpy's Philox 4x64 counter-based generator keyed by
``(seed ^ image_index, stream)``, so every image and every purpose (scene
layout, detector, each teacher modality) draws from its own reproducible
stream regardless of processing order.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .datamodel import (
    Annotation,
    Category,
    ClassSplit,
    Dataset,
    ImageRecord,
    Modality,
    Source,
    Split,
    derived_image_id,
)
from .evaluation import Detection
from .geometry import BBox, clamp_to_image, iou
from .pseudolabel import Proposal

MASK64 = (1 << 64) - 1

STREAM_SCENE = 1
STREAM_DETECTOR = 2
STREAM_TEACHER = {Modality.RGB: 3, Modality.DEPTH: 4, Modality.NORMAL: 5}

COMMON_CLASSES = ("pedestrian", "cyclist", "car", "truck", "tram", "tricycle", "bus")
DEFAULT_NOVEL_CLASSES = ("stroller", "dog", "traffic_cone", "barrier", "debris")


class SynthError(RuntimeError):
    pass


def stream_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[(seed ^ index) & MASK64, stream]))


def default_categories() -> tuple[Category, ...]:
    names = [(n, Split.COMMON) for n in COMMON_CLASSES] + [(n, Split.NOVEL) for n in DEFAULT_NOVEL_CLASSES]
    return tuple(Category(i, n, s) for i, (n, s) in enumerate(names, 1))


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (640, 480)
    objects_per_image: tuple[int, int] = (2, 8)
    categories: tuple[Category, ...] = field(default_factory=default_categories)
    box_size: tuple[int, int] = (16, 120)
    max_iou: float = 0.3
    seed: int = 0
    modalities: tuple[Modality, ...] = (Modality.RGB,)
    agnostic_id: int = 1000
    retry_budget: int = 1000

    def __post_init__(self) -> None:
        w, h = self.image_size
        lo, hi = self.objects_per_image
        smin, smax = self.box_size
        if w <= 0 or h <= 0:
            raise ValueError("image size must be positive")
        if not 0 <= lo <= hi:
            raise ValueError("objects_per_image range is empty")
        if not 1 <= smin <= smax or smax > min(w, h):
            raise ValueError("box_size range must be nonempty and fit inside the image")
        if not 0.0 <= self.max_iou < 1.0:
            raise ValueError("max_iou must lie in [0, 1)")
        if not self.categories:
            raise ValueError("category pool is empty")
        if any(c.split is None for c in self.categories):
            raise ValueError("every synthetic category needs a common/novel tag")
        if Modality.RGB not in self.modalities:
            raise ValueError("scenes always include the RGB view")
        object.__setattr__(self, "modalities", tuple(Modality(m) for m in self.modalities))

    def class_split(self) -> ClassSplit:
        return ClassSplit(
            frozenset(c.id for c in self.categories if c.split == Split.COMMON),
            frozenset(c.id for c in self.categories if c.split == Split.NOVEL),
            self.agnostic_id,
        )


@dataclass(frozen=True)
class NoiseModel:
    jitter: float = 2.0
    miss_rate: Mapping[str, float] = field(default_factory=lambda: {"common": 0.1, "novel": 0.3})
    fp_rate: float = 1.0
    margin: float = 0.1
    tp_score: tuple[float, float] = (0.6, 1.0)

    def __post_init__(self) -> None:
        if self.jitter < 0 or self.fp_rate < 0:
            raise ValueError("jitter and fp_rate must be nonnegative")
        if any(not 0.0 <= r <= 1.0 for r in self.miss_rate.values()):
            raise ValueError("miss rates must lie in [0, 1]")
        if not 0.0 <= self.margin <= self.tp_score[0]:
            raise ValueError("margin must lie in [0, lower TP score]")

    @classmethod
    def zero(cls) -> NoiseModel:
        """Perfect detector: exact boxes, score 1.0, no misses, no false positives."""
        return cls(jitter=0.0, miss_rate={"common": 0.0, "novel": 0.0}, fp_rate=0.0, tp_score=(1.0, 1.0))

    def miss(self, split: Split | None) -> float:
        return float(self.miss_rate.get(split.value if split else "common", 0.0))

    def fp_score_range(self) -> tuple[float, float]:
        return (0.0, self.tp_score[0] - self.margin)


def _sample_box(rng: np.random.Generator, cfg: SceneConfig) -> BBox:
    w_img, h_img = cfg.image_size
    smin, smax = cfg.box_size
    bw = int(rng.integers(smin, smax + 1))
    bh = int(rng.integers(smin, smax + 1))
    x = int(rng.integers(0, w_img - bw + 1))
    y = int(rng.integers(0, h_img - bh + 1))
    return BBox(float(x), float(y), float(x + bw), float(y + bh))


def _scene_boxes(rng: np.random.Generator, cfg: SceneConfig, count: int, index: int) -> list[BBox]:
    boxes: list[BBox] = []
    for _ in range(count):
        for _attempt in range(cfg.retry_budget):
            cand = _sample_box(rng, cfg)
            if all(iou(cand, b) <= cfg.max_iou for b in boxes):
                boxes.append(cand)
                break
        else:
            raise SynthError(
                f"scene {index}: could not place {count} boxes with pairwise IoU <= {cfg.max_iou} "
                f"after {cfg.retry_budget} tries; use fewer or smaller objects"
            )
    return boxes


def generate_scenes(cfg: SceneConfig, n: int) -> Dataset:
    """``n`` scenes. Scene ``k`` has RGB image id ``derived_image_id(k + 1, rgb)`` with ground truth;
    other configured modalities become unlabeled pseudo-source views pointing back at it."""
    images: list[ImageRecord] = []
    anns: list[Annotation] = []
    w_img, h_img = cfg.image_size
    lo, hi = cfg.objects_per_image
    next_ann = 1
    for k in range(n):
        rng = stream_rng(cfg.seed, k, STREAM_SCENE)
        base = k + 1
        rgb_id = derived_image_id(base, Modality.RGB)
        images.append(ImageRecord(rgb_id, w_img, h_img, f"scene_{base:05d}_rgb.png"))
        for m in cfg.modalities:
            if m != Modality.RGB:
                images.append(
                    ImageRecord(
                        derived_image_id(base, m), w_img, h_img, f"scene_{base:05d}_{m.value}.png",
                        modality=m, source=Source.PSEUDO, parent_id=rgb_id,
                    )
                )
        count = int(rng.integers(lo, hi + 1))
        for box in _scene_boxes(rng, cfg, count, k):
            cat = cfg.categories[int(rng.integers(0, len(cfg.categories)))]
            anns.append(Annotation(next_ann, rgb_id, cat.id, box))
            next_ann += 1
    ds = Dataset(tuple(images), tuple(anns), cfg.categories)
    ds.validate()
    return ds


def _jitter(rng: np.random.Generator, box: BBox, sigma: float, w_img: int, h_img: int) -> BBox:
    if sigma == 0.0:
        return box
    for _ in range(100):
        x1, y1, x2, y2 = np.asarray(box.as_tuple()) + rng.normal(0.0, sigma, 4)
        if x2 > x1 and y2 > y1:
            out = clamp_to_image(BBox(float(x1), float(y1), float(x2), float(y2)), w_img, h_img)
            if out is not None:
                return out
    return box


def _random_box(rng: np.random.Generator, w_img: int, h_img: int) -> BBox:
    bw = float(rng.uniform(8.0, max(9.0, w_img / 4)))
    bh = float(rng.uniform(8.0, max(9.0, h_img / 4)))
    bw, bh = min(bw, w_img), min(bh, h_img)
    x = float(rng.uniform(0.0, w_img - bw))
    y = float(rng.uniform(0.0, h_img - bh))
    return BBox(x, y, x + bw, y + bh)


def _simulate(
    rng: np.random.Generator,
    image: ImageRecord,
    truth: Sequence[Annotation],
    splits: Mapping[int, Split | None],
    noise: NoiseModel,
) -> list[tuple[BBox, float, Annotation | None]]:
    out: list[tuple[BBox, float, Annotation | None]] = []
    for a in truth:
        # fixed number of draws per object keeps streams aligned across noise settings
        u_miss = rng.random()
        score = float(rng.uniform(*noise.tp_score))
        box = _jitter(rng, a.bbox, noise.jitter, image.width, image.height)
        if u_miss < noise.miss(splits.get(a.source_category_id)):
            continue
        out.append((box, score, a))
    for _ in range(int(rng.poisson(noise.fp_rate)) if noise.fp_rate > 0 else 0):
        box = _random_box(rng, image.width, image.height)
        out.append((box, float(rng.uniform(*noise.fp_score_range())), None))
    return out


def simulate_detector(
    ds: Dataset, noise: NoiseModel, seed: int, *, agnostic_id: int | None = None
) -> list[Detection]:
    """Class-aware detections on every labeled RGB image.

    Common-class hits keep their category; novel-class hits are reported under
    ``agnostic_id`` when given. False positives get a common category or the
    agnostic id at random.
    """
    splits = {c.id: c.split for c in ds.categories}
    common = sorted(c.id for c in ds.categories if c.split == Split.COMMON) or sorted(splits)
    fp_pool = common + ([agnostic_id] if agnostic_id is not None else [])
    by_image = ds.annotations_by_image()
    out: list[Detection] = []
    for index, im in enumerate(sorted(ds.images, key=lambda r: r.id)):
        if im.modality != Modality.RGB or im.source != Source.LABELED:
            continue
        rng = stream_rng(seed, index, STREAM_DETECTOR)
        truth = sorted(by_image.get(im.id, []), key=lambda a: a.id)
        for box, score, a in _simulate(rng, im, truth, splits, noise):
            if a is None:
                cat = fp_pool[int(rng.integers(0, len(fp_pool)))]
            elif agnostic_id is not None and splits.get(a.source_category_id) == Split.NOVEL:
                cat = agnostic_id
            else:
                cat = a.source_category_id
            out.append(Detection(im.id, cat, box, score))
    return out


def simulate_teacher(
    ds: Dataset, noise_per_modality: Mapping[Modality | str, NoiseModel], seed: int
) -> list[Proposal]:
    """Class-agnostic proposals on every depth/normal view, from its parent RGB ground truth."""
    noise_by = {Modality(m): n for m, n in noise_per_modality.items()}
    splits = {c.id: c.split for c in ds.categories}
    by_image = ds.annotations_by_image()
    out: list[Proposal] = []
    for index, im in enumerate(sorted(ds.images, key=lambda r: r.id)):
        if im.modality == Modality.RGB or im.modality not in noise_by:
            continue
        if im.parent_id is None:
            raise SynthError(f"image {im.id} ({im.modality.value}) has no parent RGB image")
        rng = stream_rng(seed, index, STREAM_TEACHER[im.modality])
        truth = sorted(by_image.get(im.parent_id, []), key=lambda a: a.id)
        for box, score, _ in _simulate(rng, im, truth, splits, noise_by[im.modality]):
            out.append(Proposal(im.id, im.modality, box, score))
    return out
