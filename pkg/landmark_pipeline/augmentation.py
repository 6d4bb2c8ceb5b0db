"""
Training-sample generation and the synthetic heatmap predictor.

Covers roll de-rotation, positive/negative window sampling, occluder
compositing with automatic occlusion labels, and a noise model that turns
ground-truth landmarks into CNN-like score images.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from landmark_pipeline.geometry import (
    INPUT_SIZE,
    SCORE_SIZE,
    Box,
    box_from_landmarks,
    input_frame,
    iou,
    map_points,
    original_frame,
    score_frame,
)
from landmark_pipeline.heatmap import DEFAULT_PARAMS, EncodeParams, gaussian, inside_grid
from landmark_pipeline.imaging import crop_resize, flip_horizontal, preprocess, rotate
from landmark_pipeline.landmarks import N_LANDMARKS, SYMMETRIC_PAIRS, LandmarkSet

logger = logging.getLogger(__name__)

OCCLUDED_ALPHA = 0.5


class SamplingError(ValueError):
    """Raised when a sampler cannot satisfy its constraints."""


class SamplerConfig(BaseModel):
    """Window sampling and augmentation settings."""
    model_config = ConfigDict(frozen=True)

    pos_min_iou: float = Field(0.7, ge=0, le=1, description="Minimum IOU of a positive window with the face box")
    neg_max_iou: float = Field(0.05, ge=0, le=1, description="Negative windows stay below this IOU with every face")
    roll_range: float = Field(15.0, ge=0, description="Random roll range in degrees after de-rotation")
    pos_per_face: int = Field(90, ge=0)
    neg_per_image: int = Field(60, ge=0)
    top_extend: float = Field(0.2, ge=0, description="Forehead extension of the landmark box")
    max_tries: int = Field(10_000, gt=0, description="Rejection-sampling budget per window")
    pos_scale_jitter: float = Field(0.25, ge=0, description="Log-scale jitter of positive windows")
    pos_shift_jitter: float = Field(0.2, ge=0, description="Center shift of positive windows, relative to side")
    neg_min_side: float = Field(0.1, gt=0, le=1, description="Smallest negative window, relative to the short image side")
    occluder_scale: Tuple[float, float] = Field((0.15, 0.6), description="Occluder width relative to face width")
    occlude_prob: float = Field(0.5, ge=0, le=1)
    flip_prob: float = Field(0.5, ge=0, le=1)
    output_size: int = Field(256, gt=0)

    @model_validator(mode="after")
    def _check_ordering(self):
        if not (0 <= self.neg_max_iou < self.pos_min_iou <= 1):
            raise ValueError("Need 0 <= neg_max_iou < pos_min_iou <= 1")
        lo, hi = self.occluder_scale
        if not (0 < lo <= hi):
            raise ValueError("occluder_scale must be an increasing positive interval")
        return self


class NoiseModel(BaseModel):
    """Corruptions applied by the synthetic predictor."""
    model_config = ConfigDict(frozen=True)

    pixel_noise_sigma: float = Field(0.0, ge=0, description="Additive Gaussian noise, heatmap units")
    center_jitter_sigma: float = Field(0.0, ge=0, description="Blob center jitter, score pixels")
    amplitude_scale_range: Tuple[float, float] = Field((1.0, 1.0), description="Uniform amplitude scale interval")
    dropout_prob: float = Field(0.0, ge=0, le=1, description="Probability that a map is zeroed")

    @model_validator(mode="after")
    def _check_range(self):
        lo, hi = self.amplitude_scale_range
        if not (0 <= lo <= hi):
            raise ValueError("amplitude_scale_range must be a non-negative increasing interval")
        return self


@dataclass(frozen=True)
class Occluder:
    image: np.ndarray
    category: str = "generic"

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 4:
            raise SamplingError(f"Occluder needs an RGBA image, got shape {self.image.shape}")


class OccluderLibrary:
    """
    Occluders grouped by category.

    Selection is two-stage uniform: a category first, then an instance.
    """

    def __init__(self, categories: Dict[str, List[Occluder]]):
        self.categories = {name: list(items) for name, items in categories.items() if items}
        if not self.categories:
            raise SamplingError("Occluder library is empty")

    @classmethod
    def from_directory(cls, root) -> "OccluderLibrary":
        """Load ``root/<category>/*.png`` RGBA files."""
        from landmark_pipeline.utils import read_image

        root = Path(root)
        categories = {}
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            items = []
            for png in sorted(sub.glob("*.png")):
                img = read_image(png, keep_alpha=True)
                if img.ndim == 3 and img.shape[2] == 4:
                    items.append(Occluder(img, sub.name))
                else:
                    logger.warning(f"Skipping {png}: no alpha channel")
            categories[sub.name] = items
        logger.info(f"Loaded {sum(len(v) for v in categories.values())} occluders from {root}")
        return cls(categories)

    def choose(self, rng: np.random.Generator) -> Occluder:
        names = sorted(self.categories)
        items = self.categories[names[rng.integers(len(names))]]
        return items[rng.integers(len(items))]


@dataclass(frozen=True)
class TrainingSample:
    """A 256x256 training window and its labels (landmarks are None for negatives)."""
    image: np.ndarray
    window: Box
    positive: bool
    landmarks: Optional[LandmarkSet] = None

    def labels(self, params: EncodeParams = DEFAULT_PARAMS) -> np.ndarray:
        """Signed Gaussian label stack; zeros for negatives and off-grid points."""
        stack = np.zeros((N_LANDMARKS, SCORE_SIZE, SCORE_SIZE))
        if not self.positive or self.landmarks is None:
            return stack
        # Window pixels -> 256 input frame -> score frame.
        pts = self.landmarks.points * (INPUT_SIZE / self.image.shape[1])
        pts = map_points(pts, input_frame(self.window), score_frame(self.window))
        for i, (x, y) in enumerate(pts):
            if self.landmarks.detected[i] and inside_grid(x, y):
                amp = params.amplitude_occluded if self.landmarks.occ_flag[i] else params.amplitude_visible
                stack[i] = amp * gaussian(x, y, params.sigma)
        return stack


def roll_angle(lms: LandmarkSet) -> float:
    """
    Rotation (degrees) that brings the symmetric landmark pairs closest to horizontal.

    Minimizes the summed squared vertical offsets of the pairs after rotation;
    the optimum is the principal direction of the pair vectors.
    """
    vectors = []
    for left, right in SYMMETRIC_PAIRS:
        if lms.detected[left] and lms.detected[right]:
            vectors.append(lms.points[right] - lms.points[left])
    v = np.asarray(vectors, dtype=float).reshape(-1, 2)
    sxx, syy, sxy = np.sum(v[:, 0] ** 2), np.sum(v[:, 1] ** 2), np.sum(v[:, 0] * v[:, 1])
    if sxx + syy <= 1e-12:
        raise SamplingError("Symmetric landmark pairs are degenerate; cannot estimate roll")
    return math.degrees(0.5 * math.atan2(2.0 * sxy, sxx - syy))


def derotate_roll(img: np.ndarray, lms: LandmarkSet) -> Tuple[np.ndarray, LandmarkSet, float]:
    """Rotate the face upright about its landmark centroid; returns the applied angle."""
    angle = roll_angle(lms)
    rotated, points = rotate(img, angle, tuple(lms.centroid()), lms)
    return rotated, points, angle


def random_roll(
    img: np.ndarray,
    lms: LandmarkSet,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, LandmarkSet, float]:
    angle = float(rng.uniform(-cfg.roll_range, cfg.roll_range))
    rotated, points = rotate(img, angle, tuple(lms.centroid()), lms)
    return rotated, points, angle


def sample_positive(gt_box: Box, cfg: SamplerConfig, rng: np.random.Generator) -> Box:
    """
    Random square window keeping at least ``cfg.pos_min_iou`` IOU with the face box.

    Raises:
        SamplingError: If the rejection budget runs out
    """
    base = math.sqrt(gt_box.area)
    center = gt_box.center
    for _ in range(cfg.max_tries):
        side = base * math.exp(rng.uniform(-cfg.pos_scale_jitter, cfg.pos_scale_jitter))
        cx = center.x + rng.uniform(-cfg.pos_shift_jitter, cfg.pos_shift_jitter) * side
        cy = center.y + rng.uniform(-cfg.pos_shift_jitter, cfg.pos_shift_jitter) * side
        box = Box(cx - side / 2.0, cy - side / 2.0, side, side)
        if iou(box, gt_box) >= cfg.pos_min_iou:
            return box
    raise SamplingError(f"No positive window with IOU >= {cfg.pos_min_iou} in {cfg.max_tries} tries")


def sample_negative(
    image_dims: Tuple[int, int],
    gt_boxes: Sequence[Box],
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> Box:
    """
    Random square window inside the image overlapping no face by ``cfg.neg_max_iou`` or more.

    Args:
        image_dims: (width, height)

    Raises:
        SamplingError: If the image is too small or the budget runs out
    """
    width, height = image_dims
    short = min(width, height)
    min_side = max(1.0, cfg.neg_min_side * short)
    if short < min_side or short <= 0:
        raise SamplingError(f"Image {width}x{height} is too small for a negative window")
    for _ in range(cfg.max_tries):
        side = rng.uniform(min_side, short)
        box = Box(rng.uniform(0, width - side), rng.uniform(0, height - side), side, side)
        if all(iou(box, gt) < cfg.neg_max_iou for gt in gt_boxes):
            return box
    raise SamplingError(f"No negative window with IOU < {cfg.neg_max_iou} in {cfg.max_tries} tries")


def place_occluder(
    face_box: Box,
    occ: Occluder,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> Box:
    """Random occluder placement: width uniform in cfg.occluder_scale of the face width, center inside the face box."""
    lo, hi = cfg.occluder_scale
    width = face_box.w * rng.uniform(lo, hi)
    height = width * occ.image.shape[0] / occ.image.shape[1]
    cx = rng.uniform(face_box.x, face_box.x2)
    cy = rng.uniform(face_box.y, face_box.y2)
    return Box(cx - width / 2.0, cy - height / 2.0, width, height)


def composite_occluder(
    face: np.ndarray,
    lms: LandmarkSet,
    occ: Occluder,
    placement: Box,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, LandmarkSet]:
    """
    Alpha-composite an occluder onto a face image and label what it covers.

    Every landmark whose pixel ends up with occluder alpha above 0.5 is
    flagged occluded; other flags are kept. When ``rng`` is given the
    occluder is mirrored with probability 0.5.
    """
    h, w = face.shape[:2]
    x0, y0 = int(math.floor(placement.x)), int(math.floor(placement.y))
    pw, ph = max(1, int(round(placement.w))), max(1, int(round(placement.h)))
    patch = occ.image
    if rng is not None and rng.random() < 0.5:
        patch = patch[:, ::-1]
    patch = cv2.resize(np.ascontiguousarray(patch), (pw, ph), interpolation=cv2.INTER_LINEAR)

    alpha = np.zeros((h, w), dtype=float)
    fx0, fy0, fx1, fy1 = max(0, x0), max(0, y0), min(w, x0 + pw), min(h, y0 + ph)
    if fx0 >= fx1 or fy0 >= fy1:
        return face.copy(), lms
    crop = patch[fy0 - y0:fy1 - y0, fx0 - x0:fx1 - x0]
    alpha[fy0:fy1, fx0:fx1] = crop[:, :, 3] / 255.0

    color = crop[:, :, :3].astype(float)
    out = face.astype(float)
    if face.ndim == 2:
        color = cv2.cvtColor(crop[:, :, :3], cv2.COLOR_RGB2GRAY).astype(float)
        region = out[fy0:fy1, fx0:fx1]
        a = alpha[fy0:fy1, fx0:fx1]
    else:
        region = out[fy0:fy1, fx0:fx1, :3]
        a = alpha[fy0:fy1, fx0:fx1, None]
    blended = a * color + (1.0 - a) * region
    if face.ndim == 2:
        out[fy0:fy1, fx0:fx1] = blended
    else:
        out[fy0:fy1, fx0:fx1, :3] = blended
    composited = np.clip(np.rint(out), 0, 255).astype(np.uint8)

    covered = np.zeros(N_LANDMARKS, dtype=bool)
    for i, (x, y) in enumerate(lms.points):
        if not lms.detected[i]:
            continue
        col, row = int(math.floor(x)), int(math.floor(y))
        if 0 <= row < h and 0 <= col < w and alpha[row, col] > OCCLUDED_ALPHA:
            covered[i] = True
    if covered.any():
        logger.debug(f"Occluder ({occ.category}) covers {int(covered.sum())} landmarks")
    return composited, lms.with_flags(lms.occ_flag | covered)


def synth_predict(
    gt: LandmarkSet,
    noise: NoiseModel,
    rng: np.random.Generator,
    params: EncodeParams = DEFAULT_PARAMS,
) -> np.ndarray:
    """
    Stand-in for the landmark network.

    Encodes each score-frame landmark with a jittered center, scaled
    amplitude (sign kept), additive pixel noise and optional dropout. With
    a zero noise model the result equals the clean label stack exactly.
    Undetected or off-grid landmarks give all-zero maps (plus pixel noise).
    """
    stack = np.zeros((N_LANDMARKS, SCORE_SIZE, SCORE_SIZE))
    lo, hi = noise.amplitude_scale_range
    for i, (x, y) in enumerate(gt.points):
        if noise.dropout_prob > 0 and rng.random() < noise.dropout_prob:
            continue
        if not gt.detected[i] or not inside_grid(x, y):
            continue
        if noise.center_jitter_sigma > 0:
            x, y = np.clip(np.array([x, y]) + rng.normal(0.0, noise.center_jitter_sigma, 2), 0.0, np.nextafter(SCORE_SIZE, 0))
        amplitude = params.amplitude_occluded if gt.occ_flag[i] else params.amplitude_visible
        if (lo, hi) != (1.0, 1.0):
            amplitude *= rng.uniform(lo, hi)
        stack[i] = amplitude * gaussian(float(x), float(y), params.sigma)
    if noise.pixel_noise_sigma > 0:
        stack += rng.normal(0.0, noise.pixel_noise_sigma, stack.shape)
    return stack


def _window_landmarks(lms: LandmarkSet, window: Box, size: int) -> LandmarkSet:
    pts = map_points(lms.points, original_frame(), input_frame(window))
    return lms.with_points(pts * (size / 256.0), input_frame(window))


def generate_samples(
    img: np.ndarray,
    faces: Sequence[LandmarkSet],
    cfg: SamplerConfig,
    rng: np.random.Generator,
    library: Optional[OccluderLibrary] = None,
) -> List[TrainingSample]:
    """
    Positive and negative training windows for one annotated image.

    Positives: CLAHE, roll de-rotation, random roll, window sampling,
    optional occluder, optional flip, resize. Source landmarks are all
    labelled visible; only synthetic occlusion marks landmarks occluded.
    Negatives are sampled from the preprocessed frame away from every face.
    """
    pre = preprocess(img)
    size = cfg.output_size
    samples: List[TrainingSample] = []
    gt_boxes = []

    for lms in faces:
        lms = LandmarkSet.from_points(lms.points)
        gt_boxes.append(box_from_landmarks(lms, cfg.top_extend))
        upright, upright_lms, _ = derotate_roll(pre, lms)
        rolled, rolled_lms, _ = random_roll(upright, upright_lms, cfg, rng)
        face_box = box_from_landmarks(rolled_lms, cfg.top_extend)

        for _ in range(cfg.pos_per_face):
            window = sample_positive(face_box, cfg, rng)
            crop = crop_resize(rolled, window, size)
            crop_lms = _window_landmarks(rolled_lms, window, size)
            if library is not None and rng.random() < cfg.occlude_prob:
                occ = library.choose(rng)
                face_in_crop = map_points(
                    np.array([[face_box.x, face_box.y], [face_box.x2, face_box.y2]]),
                    original_frame(), input_frame(window),
                ) * (size / 256.0)
                crop_face = Box.from_corners(*face_in_crop[0], *face_in_crop[1])
                placement = place_occluder(crop_face, occ, cfg, rng)
                crop, crop_lms = composite_occluder(crop, crop_lms, occ, placement, rng)
            if rng.random() < cfg.flip_prob:
                crop, crop_lms = flip_horizontal(crop, crop_lms)
            samples.append(TrainingSample(crop, window, True, crop_lms))

    height, width = pre.shape[:2]
    for _ in range(cfg.neg_per_image):
        window = sample_negative((width, height), gt_boxes, cfg, rng)
        samples.append(TrainingSample(crop_resize(pre, window, size), window, False))

    logger.info(f"Generated {len(samples)} samples from {len(faces)} faces")
    return samples


def random_occlusion(
    points: np.ndarray,
    face_box: Box,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> Tuple[Box, np.ndarray]:
    """
    Square occluder footprint placed like :func:`place_occluder` and the landmarks it covers.

    Returns:
        (footprint, covered mask)
    """
    lo, hi = cfg.occluder_scale
    side = face_box.w * rng.uniform(lo, hi)
    cx = rng.uniform(face_box.x, face_box.x2)
    cy = rng.uniform(face_box.y, face_box.y2)
    footprint = Box(cx - side / 2.0, cy - side / 2.0, side, side)
    pts = np.asarray(points, dtype=float)
    covered = np.array([np.all(np.isfinite(p)) and footprint.contains(*p) for p in pts])
    return footprint, covered


def detection_boxes(
    face_box: Box,
    count: int,
    rng: np.random.Generator,
    margin: float = 1.25,
    scale_sigma: float = 0.05,
    shift_sigma: float = 0.03,
) -> List[Box]:
    """
    Simulated detector output for one face.

    The first box is the square of side ``margin`` times the longer face-box
    side, centered on the face; the others jitter its log-scale and center.
    """
    first = face_box.square().expand((margin - 1.0) / 2.0)
    center, side = first.center, first.w
    boxes = [first]
    for _ in range(count - 1):
        s = side * math.exp(rng.normal(0.0, scale_sigma))
        cx = center.x + rng.normal(0.0, shift_sigma) * side
        cy = center.y + rng.normal(0.0, shift_sigma) * side
        boxes.append(Box(cx - s / 2.0, cy - s / 2.0, s, s))
    return boxes
