"""
Image preprocessing and geometric augmentation primitives.

Images are numpy uint8 arrays, (H, W) for grayscale or (H, W, 3) for RGB.
Every function returns a new array and leaves its input untouched.
"""

import logging
import math
from dataclasses import replace
from typing import Optional, Tuple, Union

import cv2
import numpy as np

from landmark_pipeline.geometry import INPUT_SIZE, Box, Point2
from landmark_pipeline.landmarks import MIRROR, LandmarkSet

logger = logging.getLogger(__name__)

CLAHE_CLIP_LIMIT = 2.0
CLAHE_TILES = (8, 8)


class ImagingError(ValueError):
    """Raised for invalid image-processing parameters."""


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ImagingError(f"Expected an 8-bit image, got dtype {img.dtype}")
    if img.ndim == 2 or (img.ndim == 3 and img.shape[2] in (1, 3, 4)):
        return img
    raise ImagingError(f"Expected (H, W) or (H, W, C) image, got shape {img.shape}")


def clahe(
    img: np.ndarray,
    clip_limit: float = CLAHE_CLIP_LIMIT,
    tiles: Tuple[int, int] = CLAHE_TILES,
) -> np.ndarray:
    """
    Contrast-limited adaptive histogram equalization on the luma channel.

    RGB input is converted to YCrCb (BT.601, full range), only Y is
    equalized, and the result is converted back. Grayscale input is
    equalized directly.

    Args:
        img: uint8 image
        clip_limit: Histogram clip height relative to a uniform bin; ``inf``
            disables clipping
        tiles: Tile grid as (columns, rows)

    Returns:
        Equalized image of the same shape

    Raises:
        ImagingError: If clip_limit <= 0 or the tile grid exceeds the image
    """
    img = validate_image(img)
    if not clip_limit > 0:
        raise ImagingError(f"clip_limit must be positive, got {clip_limit}")
    h, w = img.shape[:2]
    tx, ty = int(tiles[0]), int(tiles[1])
    if tx < 1 or ty < 1 or tx > w or ty > h:
        raise ImagingError(f"Tile grid {tx}x{ty} does not fit a {w}x{h} image")

    # OpenCV treats a non-positive clip limit as "no clipping".
    cv_clip = 0.0 if math.isinf(clip_limit) else float(clip_limit)
    equalizer = cv2.createCLAHE(clipLimit=cv_clip, tileGridSize=(tx, ty))

    if img.ndim == 2:
        return equalizer.apply(img)
    if img.shape[2] == 1:
        return equalizer.apply(img[:, :, 0])[:, :, None]

    ycrcb = cv2.cvtColor(img[:, :, :3], cv2.COLOR_RGB2YCrCb)
    ycrcb[:, :, 0] = equalizer.apply(np.ascontiguousarray(ycrcb[:, :, 0]))
    out = cv2.cvtColor(ycrcb, cv2.COLOR_YCrCb2RGB)
    if img.shape[2] == 4:
        out = np.dstack([out, img[:, :, 3]])
    return out


def preprocess(img: np.ndarray) -> np.ndarray:
    """Full-frame CLAHE with the default parameters, applied before any cropping."""
    return clahe(img, CLAHE_CLIP_LIMIT, CLAHE_TILES)


def rotation_matrix(angle: float, center: Union[Point2, tuple]) -> np.ndarray:
    """2x3 affine rotation about ``center`` in continuous coordinates (degrees, counter-clockwise on screen)."""
    cx, cy = (center.x, center.y) if isinstance(center, Point2) else center
    return cv2.getRotationMatrix2D((float(cx), float(cy)), float(angle), 1.0)


def transform_points(points: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    return pts @ matrix[:, :2].T + matrix[:, 2]


def rotate(
    img: np.ndarray,
    angle: float,
    center: Union[Point2, tuple],
    points: Optional[LandmarkSet] = None,
) -> Tuple[np.ndarray, Optional[LandmarkSet]]:
    """
    Rotate an image and its landmarks about ``center``.

    Pixels are bilinearly resampled; landmarks are transformed analytically by
    the same rotation, so ``rotate(-a)`` after ``rotate(a)`` returns them exactly.
    """
    img = validate_image(img)
    cx, cy = (center.x, center.y) if isinstance(center, Point2) else center
    h, w = img.shape[:2]

    # warpAffine addresses pixel centers at integers.
    pixel_matrix = rotation_matrix(angle, (cx - 0.5, cy - 0.5))
    rotated = cv2.warpAffine(
        img, pixel_matrix, (w, h),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )
    if rotated.ndim == 2 and img.ndim == 3:
        rotated = rotated[:, :, None]

    if points is None:
        return rotated, None
    moved = transform_points(points.points, rotation_matrix(angle, (cx, cy)))
    return rotated, points.with_points(moved)


def crop_resize(
    img: np.ndarray,
    box: Box,
    out: Union[int, Tuple[int, int]] = INPUT_SIZE,
) -> np.ndarray:
    """
    Crop ``box`` out of ``img`` and resample it to ``out`` pixels.

    The box may extend past the image; samples whose centers fall outside
    the image are zero. Bilinear interpolation.

    Raises:
        ImagingError: If the box lies entirely outside the image
    """
    img = validate_image(img)
    h, w = img.shape[:2]
    out_w, out_h = (out, out) if isinstance(out, int) else out
    if box.x >= w or box.y >= h or box.x2 <= 0 or box.y2 <= 0:
        raise ImagingError(f"Crop box {box} lies outside the {w}x{h} image")

    sx, sy = out_w / box.w, out_h / box.h
    matrix = np.array([
        [sx, 0.0, sx * (0.5 - box.x) - 0.5],
        [0.0, sy, sy * (0.5 - box.y) - 0.5],
    ])
    resized = cv2.warpAffine(
        img, matrix, (out_w, out_h),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REPLICATE,
    )
    if resized.ndim == 2 and img.ndim == 3:
        resized = resized[:, :, None]

    # Zero every output sample whose source center lies outside the image.
    src_x = box.x + (np.arange(out_w) + 0.5) / sx
    src_y = box.y + (np.arange(out_h) + 0.5) / sy
    inside = ((src_y >= 0) & (src_y < h))[:, None] & ((src_x >= 0) & (src_x < w))[None, :]
    resized[~inside] = 0
    return resized


def flip_horizontal(
    img: np.ndarray,
    points: Optional[LandmarkSet] = None,
) -> Tuple[np.ndarray, Optional[LandmarkSet]]:
    """
    Mirror an image about its vertical axis.

    Landmark x coordinates map to ``width - x`` and indices are swapped by the
    68-point mirror table, so "left eye outer corner" stays the left eye outer
    corner of the mirrored face. Occlusion data travels with its landmark.
    """
    img = validate_image(img)
    flipped = np.ascontiguousarray(img[:, ::-1])
    if points is None:
        return flipped, None

    width = img.shape[1]
    mirrored = points.reindexed(MIRROR)
    pts = mirrored.points.copy()
    pts[:, 0] = width - pts[:, 0]
    return flipped, replace(mirrored, points=pts)
