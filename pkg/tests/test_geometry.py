import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cornercase.geometry import (
    BBox,
    InvalidBoxError,
    area,
    clamp_to_image,
    enclosing_box,
    giou,
    iou,
)


@st.composite
def boxes(draw, lo=-100.0, hi=100.0):
    x1 = draw(st.floats(lo, hi))
    y1 = draw(st.floats(lo, hi))
    w = draw(st.floats(0.01, 50.0))
    h = draw(st.floats(0.01, 50.0))
    return BBox(x1, y1, x1 + w, y1 + h)


@pytest.mark.parametrize(
    "coords, expected",
    [((0, 0, 1, 1), 1.0), ((0, 0, 2, 3), 6.0), ((1.5, 2.5, 4.0, 3.0), 1.25)],
)
def test_area(coords, expected):
    assert area(BBox(*coords)) == expected


@pytest.mark.parametrize("coords", [(0, 0, 0, 1), (0, 0, 1, 0), (1, 0, 0, 1), (0, 0, math.inf, 1), (0, math.nan, 1, 1)])
def test_degenerate_boxes_rejected(coords):
    with pytest.raises(InvalidBoxError):
        BBox(*coords)


def test_iou_examples():
    unit = BBox(0, 0, 1, 1)
    assert iou(unit, unit) == 1.0
    assert iou(unit, BBox(5, 5, 6, 6)) == 0.0
    assert iou(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-12)


def test_enclosing_box_examples():
    unit = BBox(0, 0, 1, 1)
    assert enclosing_box(unit, unit) == unit
    assert enclosing_box(unit, BBox(2, 2, 3, 3)) == BBox(0, 0, 3, 3)
    assert enclosing_box(BBox(0, 1, 2, 4), BBox(1, 0, 3, 2)) == BBox(0, 0, 3, 4)


def test_giou_examples():
    unit = BBox(0, 0, 1, 1)
    assert giou(unit, unit) == 1.0
    assert giou(unit, BBox(1, 0, 2, 1)) == 0.0
    assert giou(unit, BBox(2, 0, 3, 1)) == pytest.approx(-1 / 3, abs=1e-12)


def test_touching_edges_have_zero_overlap():
    assert iou(BBox(0, 0, 1, 1), BBox(1, 1, 2, 2)) == 0.0


def test_giou_tends_to_minus_one_with_separation():
    a = BBox(0, 0, 1, 1)
    values = [giou(a, a.shifted(d, d)) for d in (2, 5, 10, 100, 1000, 1e5)]
    assert all(x > y for x, y in zip(values, values[1:]))
    assert values[-1] == pytest.approx(-1.0, abs=1e-4)
    assert all(v > -1.0 for v in values)


def test_clamp_to_image():
    assert clamp_to_image(BBox(-5, -5, 5, 5), 10, 10) == BBox(0, 0, 5, 5)
    assert clamp_to_image(BBox(20, 20, 30, 30), 10, 10) is None


def test_xywh_round_trip():
    b = BBox.from_xywh(1.5, 2.0, 3.0, 4.25)
    assert b == BBox(1.5, 2.0, 4.5, 6.25)
    assert b.to_xywh() == (1.5, 2.0, 3.0, 4.25)
    assert b.to_cxcywh() == (3.0, 4.125, 3.0, 4.25)


@given(boxes(), boxes())
def test_symmetry_and_bounds(a, b):
    assert iou(a, b) == iou(b, a)
    assert giou(a, b) == pytest.approx(giou(b, a), abs=1e-15)
    assert 0.0 <= iou(a, b) <= 1.0
    assert -1.0 < giou(a, b) <= 1.0
    assert giou(a, b) <= iou(a, b) + 1e-15


@settings(max_examples=200)
@given(boxes(0, 100), boxes(0, 100), st.floats(-100, 100), st.floats(-100, 100))
def test_translation_invariance(a, b, dx, dy):
    a2, b2 = a.shifted(dx, dy), b.shifted(dx, dy)
    assert abs(iou(a, b) - iou(a2, b2)) <= 1e-12
    assert abs(giou(a, b) - giou(a2, b2)) <= 1e-12


@settings(max_examples=200)
@given(boxes(), boxes(), st.floats(0.01, 100.0))
def test_scale_invariance(a, b, k):
    assert iou(a.scaled(k), b.scaled(k)) == pytest.approx(iou(a, b), rel=1e-9, abs=1e-300)
    assert giou(a.scaled(k), b.scaled(k)) == pytest.approx(giou(a, b), rel=1e-9, abs=1e-12)
