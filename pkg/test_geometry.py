"""
Tests for boxes, IOU, landmark boxes and frame mapping.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from landmark_pipeline.geometry import (
    Box,
    GeometryError,
    Point2,
    box_from_landmarks,
    input_frame,
    iou,
    map_point,
    map_points,
    original_frame,
    score_frame,
)

coords = st.floats(-500, 500, allow_nan=False)
extents = st.floats(1, 400, allow_nan=False)
boxes = st.builds(Box, coords, coords, extents, extents)


def test_iou_identical_and_disjoint():
    b = Box(3, 4, 10, 20)
    assert iou(b, b) == pytest.approx(1.0)
    assert iou(Box(0, 0, 10, 10), Box(20, 20, 5, 5)) == 0.0
    assert iou(Box(0, 0, 10, 10), Box(10, 0, 10, 10)) == 0.0


def test_iou_half_shift_matches_pixel_count():
    a, b = Box(0, 0, 10, 10), Box(5, 0, 10, 10)
    grid_a = np.zeros((20, 20), bool)
    grid_b = np.zeros((20, 20), bool)
    grid_a[0:10, 0:10] = True
    grid_b[0:10, 5:15] = True
    brute = (grid_a & grid_b).sum() / (grid_a | grid_b).sum()
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(a, b) == pytest.approx(brute)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0


def test_box_rejects_degenerate_extent():
    with pytest.raises(GeometryError):
        Box(0, 0, 0, 5)
    with pytest.raises(GeometryError):
        Box(0, 0, 5, float("nan"))


def test_box_from_landmarks_extends_top():
    pts = np.array([[10, 10], [20, 20], [10, 20], [20, 10]], dtype=float)
    assert box_from_landmarks(pts) == Box(10, 8, 10, 12)

    unit = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float)
    box = box_from_landmarks(unit)
    assert (box.x, box.y, box.w, box.h) == pytest.approx((0, -0.2, 1, 1.2))


def test_box_from_landmarks_single_point_is_degenerate():
    with pytest.raises(GeometryError):
        box_from_landmarks(np.array([[5.0, 5.0]]))
    with pytest.raises(GeometryError):
        box_from_landmarks(np.zeros((0, 2)))


def test_box_from_landmarks_ignores_undetected(face_points):
    from landmark_pipeline.landmarks import LandmarkSet

    pts = face_points.copy()
    pts[0] = (np.nan, np.nan)
    lms = LandmarkSet.from_points(pts)
    assert not lms.detected[0]
    box = box_from_landmarks(lms)
    assert np.isfinite(box.as_list()).all()


def test_square_keeps_center():
    sq = Box(0, 0, 10, 30).square()
    assert sq.w == sq.h == 30
    assert (sq.center.x, sq.center.y) == (5, 15)


def test_expand_grows_every_side():
    grown = Box(10, 20, 40, 20).expand(0.25)
    assert grown.as_list() == [0.0, 15.0, 60.0, 30.0]
    assert (grown.center.x, grown.center.y) == (30.0, 30.0)
    assert Box(10, 20, 40, 20).expand(0.0) == Box(10, 20, 40, 20)


def test_map_point_examples():
    assert map_point(Point2(32, 32), score_frame(), input_frame()) == Point2(128, 128)
    assert map_point(Point2(0.5, 0.5), score_frame(), input_frame()) == Point2(2, 2)
    det = Box(100, 50, 256, 256)
    assert map_point(Point2(0, 0), input_frame(det), original_frame()) == Point2(100, 50)


def test_map_point_needs_detection_box():
    with pytest.raises(GeometryError):
        map_point(Point2(1, 1), score_frame(), original_frame())


@given(boxes, st.floats(0, 64, exclude_max=True), st.floats(0, 64, exclude_max=True))
@settings(max_examples=200)
def test_map_point_round_trip(box, x, y):
    there = map_point(Point2(x, y), score_frame(box), original_frame())
    back = map_point(there, original_frame(), score_frame(box))
    assert back.x == pytest.approx(x, abs=1e-9)
    assert back.y == pytest.approx(y, abs=1e-9)


def test_map_points_between_detection_frames():
    a, b = Box(0, 0, 256, 256), Box(64, 0, 256, 256)
    pts = np.array([[40.0, 10.0]])
    out = map_points(pts, score_frame(a), score_frame(b))
    # b sits 64 original px (= 16 score px) to the right of a.
    assert out[0] == pytest.approx([24.0, 10.0])
