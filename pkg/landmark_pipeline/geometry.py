"""
Axis-aligned boxes, IOU and the coordinate frames of the landmark pipeline.

Coordinates are continuous: pixel ``i`` spans ``[i, i + 1)`` and its center
sits at ``i + 0.5``. Three frames are chained:

    score (64x64)  --x4-->  input (256x256)  --detection box-->  original
"""

import logging
from dataclasses import dataclass
from typing import Literal, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

SCORE_SIZE = 64
INPUT_SIZE = 256
TOP_EXTEND = 0.2

FrameKind = Literal["score", "input", "original"]


class GeometryError(ValueError):
    """Raised for degenerate boxes, empty point sets and invalid frame chains."""


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise GeometryError(f"Point coordinates must be finite, got ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class Box:
    """
    Axis-aligned box in continuous pixel coordinates.

    Attributes:
        x: Left edge
        y: Top edge
        w: Width (> 0)
        h: Height (> 0)
    """
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        values = (self.x, self.y, self.w, self.h)
        if not all(np.isfinite(v) for v in values):
            raise GeometryError(f"Box fields must be finite, got {values}")
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"Box must have positive extent, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(float(x1), float(y1), float(x2 - x1), float(y2 - y1))

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> Point2:
        return Point2(self.x + self.w / 2.0, self.y + self.h / 2.0)

    def contains(self, x: float, y: float, tol: float = 1e-9) -> bool:
        return (self.x - tol <= x <= self.x2 + tol) and (self.y - tol <= y <= self.y2 + tol)

    def square(self) -> "Box":
        """Square box of side max(w, h) sharing this box's center."""
        side = max(self.w, self.h)
        c = self.center
        return Box(c.x - side / 2.0, c.y - side / 2.0, side, side)

    def expand(self, ratio: float) -> "Box":
        """Grow every side by ``ratio`` of the corresponding extent."""
        return Box(
            self.x - ratio * self.w,
            self.y - ratio * self.h,
            self.w * (1.0 + 2.0 * ratio),
            self.h * (1.0 + 2.0 * ratio),
        )

    def as_list(self) -> list:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class CoordFrame:
    """
    A coordinate frame of the pipeline.

    ``detection_box`` ties score and input frames to the original image; it
    is required whenever a mapping crosses into or out of the original frame.
    """
    kind: FrameKind
    detection_box: Optional[Box] = None

    @property
    def size(self) -> Optional[int]:
        return {"score": SCORE_SIZE, "input": INPUT_SIZE}.get(self.kind)


def score_frame(box: Optional[Box] = None) -> CoordFrame:
    return CoordFrame("score", box)


def input_frame(box: Optional[Box] = None) -> CoordFrame:
    return CoordFrame("input", box)


def original_frame() -> CoordFrame:
    return CoordFrame("original")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when they are disjoint."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return float(min(1.0, max(0.0, inter / union)))


def box_from_landmarks(points, top_extend: float = TOP_EXTEND) -> Box:
    """
    Face box around a set of landmarks.

    The tight bounding box of the points is extended upward by
    ``top_extend`` times its height to include the forehead; the width is
    unchanged.

    Args:
        points: LandmarkSet (detected points only) or an (N, 2) array
        top_extend: Fraction of the tight height added above the top edge

    Returns:
        The extended Box

    Raises:
        GeometryError: If there are no points or they have zero extent
    """
    detected = getattr(points, "detected", None)
    pts = np.asarray(getattr(points, "points", points), dtype=float).reshape(-1, 2)
    if detected is not None:
        pts = pts[np.asarray(detected, dtype=bool)]
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if len(pts) == 0:
        raise GeometryError("Cannot build a box from an empty point set")

    x1, y1 = pts.min(axis=0)
    x2, y2 = pts.max(axis=0)
    w, h = x2 - x1, y2 - y1
    if w <= 0 or h <= 0:
        raise GeometryError(f"Landmarks have zero extent (w={w}, h={h})")
    return Box(float(x1), float(y1 - top_extend * h), float(w), float(h * (1.0 + top_extend)))


def _to_input(pts: np.ndarray, frame: CoordFrame) -> np.ndarray:
    if frame.kind == "score":
        return pts * (INPUT_SIZE / SCORE_SIZE)
    if frame.kind == "input":
        return pts
    raise GeometryError("original frame has no input-frame equivalent without a detection box")


def _from_input(pts: np.ndarray, frame: CoordFrame) -> np.ndarray:
    if frame.kind == "score":
        return pts * (SCORE_SIZE / INPUT_SIZE)
    if frame.kind == "input":
        return pts
    raise GeometryError("original frame has no input-frame equivalent without a detection box")


def _to_original(pts: np.ndarray, frame: CoordFrame) -> np.ndarray:
    if frame.kind == "original":
        return pts
    box = frame.detection_box
    if box is None:
        raise GeometryError(f"{frame.kind} frame needs a detection_box to reach the original frame")
    inp = _to_input(pts, frame)
    scale = np.array([box.w, box.h]) / INPUT_SIZE
    return inp * scale + np.array([box.x, box.y])


def _from_original(pts: np.ndarray, frame: CoordFrame) -> np.ndarray:
    if frame.kind == "original":
        return pts
    box = frame.detection_box
    if box is None:
        raise GeometryError(f"{frame.kind} frame needs a detection_box to leave the original frame")
    inp = (pts - np.array([box.x, box.y])) * (INPUT_SIZE / np.array([box.w, box.h]))
    return _from_input(inp, frame)


def map_points(points, src: CoordFrame, dst: CoordFrame) -> np.ndarray:
    """
    Map an (N, 2) array of continuous coordinates between frames.

    Score and input frames scale about the origin (``c -> c * W'/W``), which
    keeps pixel centers on pixel centers. Crossing into the original frame
    additionally scales by the detection box extent over 256 and translates
    by the box origin.
    """
    pts = np.asarray(points, dtype=float)
    shape = pts.shape
    pts = pts.reshape(-1, 2)

    same_box = (
        src.detection_box is None
        or dst.detection_box is None
        or src.detection_box == dst.detection_box
    )
    if src.kind != "original" and dst.kind != "original" and same_box:
        out = _from_input(_to_input(pts, src), dst)
    else:
        out = _from_original(_to_original(pts, src), dst)
    return out.reshape(shape)


def map_point(p: Union[Point2, tuple], src: CoordFrame, dst: CoordFrame) -> Point2:
    """Single-point form of :func:`map_points`."""
    xy = p.as_array() if isinstance(p, Point2) else np.asarray(p, dtype=float)
    out = map_points(xy, src, dst)
    return Point2(float(out[0]), float(out[1]))
