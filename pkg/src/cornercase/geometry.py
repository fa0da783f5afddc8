"""Axis-aligned box arithmetic.

Boxes are closed rectangles in canonical corner form ``(x1, y1, x2, y2)``,
pixel units. Touching edges have zero intersection area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite box coordinates: {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBoxError(f"degenerate box (need x2 > x1 and y2 > y1): {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> BBox:
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1)

    def to_cxcywh(self) -> tuple[float, float, float, float]:
        w = self.x2 - self.x1
        h = self.y2 - self.y1
        return (self.x1 + w / 2.0, self.y1 + h / 2.0, w, h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def shifted(self, dx: float, dy: float) -> BBox:
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def scaled(self, factor: float) -> BBox:
        return BBox(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)


def area(b: BBox) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def intersection_area(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def union_area(a: BBox, b: BBox) -> float:
    return area(a) + area(b) - intersection_area(a, b)


def enclosing_box(a: BBox, b: BBox) -> BBox:
    """Smallest axis-aligned box containing both ``a`` and ``b``."""
    return BBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def iou(a: BBox, b: BBox) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (area(a) + area(b) - inter)


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: IoU minus the fraction of the hull not covered by the union."""
    inter = intersection_area(a, b)
    union = area(a) + area(b) - inter
    hull = area(enclosing_box(a, b))
    return inter / union - (hull - union) / hull


def clamp_to_image(b: BBox, width: float, height: float) -> BBox | None:
    """Clip ``b`` to ``[0, width] x [0, height]``; ``None`` if nothing with positive area remains."""
    x1 = min(max(b.x1, 0.0), width)
    y1 = min(max(b.y1, 0.0), height)
    x2 = min(max(b.x2, 0.0), width)
    y2 = min(max(b.y2, 0.0), height)
    if x2 <= x1 or y2 <= y1:
        return None
    return BBox(x1, y1, x2, y2)
