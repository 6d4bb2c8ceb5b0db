"""
Signed-Gaussian heatmap labels and their decoding.

A landmark is encoded as a 2-D Gaussian on a 64x64 score grid whose sign
carries visibility: +1 for visible, -1 for occluded, and an all-zero grid
for non-face samples. Decoding thresholds the magnitude, keeps the connected
blob holding the peak, and takes its weighted centroid.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from landmark_pipeline.geometry import SCORE_SIZE, Box, Point2, map_points, original_frame, score_frame
from landmark_pipeline.landmarks import N_LANDMARKS, LandmarkSet

logger = logging.getLogger(__name__)

PEAK_RATIO = 0.6
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class HeatmapError(ValueError):
    """Raised for malformed heatmaps or points that cannot be encoded."""


class NoLandmarkError(HeatmapError):
    """Raised when a heatmap carries no landmark (its peak magnitude is 0)."""


class LandmarkState(str, Enum):
    VISIBLE = "visible"
    OCCLUDED = "occluded"
    NEGATIVE = "negative"


class EncodeParams(BaseModel):
    """Parameters of the Gaussian label."""
    model_config = ConfigDict(frozen=True)

    sigma: float = Field(1.5, gt=0, description="Gaussian standard deviation in score pixels")
    amplitude_visible: float = Field(1.0, description="Amplitude for visible landmarks")
    amplitude_occluded: float = Field(-1.0, description="Amplitude for occluded landmarks")
    amplitude_negative: float = Field(0.0, description="Amplitude for non-face samples")

    def amplitude(self, state: LandmarkState) -> float:
        return {
            LandmarkState.VISIBLE: self.amplitude_visible,
            LandmarkState.OCCLUDED: self.amplitude_occluded,
            LandmarkState.NEGATIVE: self.amplitude_negative,
        }[LandmarkState(state)]


DEFAULT_PARAMS = EncodeParams()

_CENTERS = np.arange(SCORE_SIZE, dtype=float) + 0.5


def inside_grid(x: float, y: float, size: int = SCORE_SIZE) -> bool:
    return bool(0.0 <= x < size and 0.0 <= y < size)


def gaussian(x: float, y: float, sigma: float, size: int = SCORE_SIZE) -> np.ndarray:
    """Unit-amplitude Gaussian evaluated at pixel centers."""
    centers = np.arange(size, dtype=float) + 0.5 if size != SCORE_SIZE else _CENTERS
    gx = np.exp(-((centers - x) ** 2) / (2.0 * sigma ** 2))
    gy = np.exp(-((centers - y) ** 2) / (2.0 * sigma ** 2))
    return np.outer(gy, gx)


def encode(
    p: Point2,
    state: LandmarkState = LandmarkState.VISIBLE,
    params: EncodeParams = DEFAULT_PARAMS,
) -> np.ndarray:
    """
    Encode one landmark as a 64x64 signed Gaussian score image.

    Args:
        p: Landmark location in the score frame
        state: visible (+A), occluded (-A) or negative (all zeros)
        params: Gaussian parameters

    Returns:
        (64, 64) float array

    Raises:
        HeatmapError: If a visible/occluded point lies outside the grid
    """
    state = LandmarkState(state)
    if state is LandmarkState.NEGATIVE:
        return np.full((SCORE_SIZE, SCORE_SIZE), params.amplitude_negative, dtype=float)
    x, y = (p.x, p.y) if isinstance(p, Point2) else (float(p[0]), float(p[1]))
    if not inside_grid(x, y):
        raise HeatmapError(f"Landmark ({x:.3f}, {y:.3f}) lies outside the {SCORE_SIZE}x{SCORE_SIZE} grid")
    return params.amplitude(state) * gaussian(x, y, params.sigma)


def encode_stack(
    points: np.ndarray,
    states: Sequence[LandmarkState],
    params: EncodeParams = DEFAULT_PARAMS,
) -> np.ndarray:
    """
    Encode 68 score-frame points into a (68, 64, 64) stack.

    Points outside the grid (or NaN) produce an all-zero map.
    """
    points = np.asarray(points, dtype=float)
    stack = np.zeros((len(points), SCORE_SIZE, SCORE_SIZE))
    for i, (pt, state) in enumerate(zip(points, states)):
        state = LandmarkState(state)
        if state is LandmarkState.NEGATIVE or not inside_grid(*pt):
            continue
        stack[i] = encode(Point2(*pt), state, params)
    return stack


def states_from_flags(occ_flag, detected=None) -> list:
    flags = np.asarray(occ_flag, dtype=bool)
    detected = np.ones_like(flags) if detected is None else np.asarray(detected, dtype=bool)
    return [
        LandmarkState.NEGATIVE if not d else (LandmarkState.OCCLUDED if f else LandmarkState.VISIBLE)
        for f, d in zip(flags, detected)
    ]


def connected_components(mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """
    8-connected component labeling.

    Labels are 1..n numbered in row-major order of each component's first
    pixel; background is 0.
    """
    labels, count = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
    if count == 0:
        return labels, 0
    flat = labels.ravel()
    present, first = np.unique(flat, return_index=True)
    order = present[1:][np.argsort(first[1:])]
    relabel = np.zeros(count + 1, dtype=labels.dtype)
    relabel[order] = np.arange(1, count + 1)
    return relabel[labels], int(count)


@dataclass(frozen=True)
class DecodedLandmark:
    location: Point2
    raw_value: float


def sample_bilinear(grid: np.ndarray, x: float, y: float) -> float:
    """Bilinear sample of ``grid`` at a continuous (x, y) position, edge-clamped."""
    coords = np.array([[y - 0.5], [x - 0.5]])
    return float(ndimage.map_coordinates(grid, coords, order=1, mode="nearest")[0])


def decode(h: np.ndarray, peak_ratio: float = PEAK_RATIO) -> DecodedLandmark:
    """
    Locate the landmark encoded in a score image.

    The magnitude is thresholded at ``peak_ratio`` of its maximum, components
    are labeled, and the component containing the global maximum (first in
    row-major order on ties) is reduced to its centroid. Pixels are weighted
    by their magnitude above the threshold, which keeps the centroid of a
    truncated blob on its true center. The signed value is then sampled
    bilinearly at the centroid.

    Raises:
        NoLandmarkError: If the heatmap is identically zero
    """
    h = np.asarray(h, dtype=float)
    magnitude = np.abs(h)
    peak_index = int(np.argmax(magnitude))
    peak = magnitude.flat[peak_index]
    if not np.isfinite(peak) or peak <= 0.0:
        raise NoLandmarkError("Heatmap has no positive magnitude")

    threshold = peak_ratio * peak
    labels, _ = connected_components(magnitude >= threshold)
    component = labels == labels.flat[peak_index]

    rows, cols = np.nonzero(component)
    weights = magnitude[rows, cols] - threshold
    if weights.sum() <= 0:
        weights = magnitude[rows, cols]
    x = float(np.average(cols + 0.5, weights=weights))
    y = float(np.average(rows + 0.5, weights=weights))
    return DecodedLandmark(Point2(x, y), sample_bilinear(h, x, y))


def decode_maps(stack: np.ndarray, peak_ratio: float = PEAK_RATIO):
    """
    Decode every map of a stack in the score frame.

    Returns:
        (locations (N, 2) with NaN where undetected, raw values (N,) with 0
        where undetected, detected mask (N,))
    """
    stack = np.asarray(stack, dtype=float)
    n = stack.shape[0]
    locations = np.full((n, 2), np.nan)
    raw = np.zeros(n)
    detected = np.zeros(n, dtype=bool)
    for i in range(n):
        try:
            found = decode(stack[i], peak_ratio)
        except NoLandmarkError:
            logger.debug(f"Landmark {i + 1} has an all-zero score image")
            continue
        locations[i] = (found.location.x, found.location.y)
        raw[i] = found.raw_value
        detected[i] = True
    return locations, raw, detected


def decode_stack(
    stack: np.ndarray,
    det: Box,
    occ_threshold: float = 0.0,
    peak_ratio: float = PEAK_RATIO,
) -> LandmarkSet:
    """
    Decode a 68-map stack into original-image landmarks.

    Locations are mapped score -> input -> original through the detection
    box; occ_score is the raw signed value at each location. Landmarks whose
    map is all zero are marked undetected.

    Args:
        stack: (68, 64, 64) score images
        det: Detection box the stack was computed for
        occ_threshold: Score below which a landmark is flagged occluded
        peak_ratio: Relative threshold for the blob mask

    Returns:
        LandmarkSet in the original frame
    """
    stack = validate_stack(stack)
    locations, raw, detected = decode_maps(stack, peak_ratio)
    points = map_points(locations, score_frame(det), original_frame())
    return LandmarkSet(
        points=points,
        occ_score=raw,
        occ_flag=detected & (raw < occ_threshold),
        detected=detected,
        frame=original_frame(),
    )


def validate_stack(stack: np.ndarray, n_maps: Optional[int] = N_LANDMARKS) -> np.ndarray:
    stack = np.asarray(stack, dtype=float)
    expected = (n_maps, SCORE_SIZE, SCORE_SIZE)
    if stack.ndim != 3 or stack.shape[1:] != expected[1:] or (n_maps and stack.shape[0] != n_maps):
        raise HeatmapError(f"Expected a heatmap stack of shape {expected}, got {stack.shape}")
    return stack
