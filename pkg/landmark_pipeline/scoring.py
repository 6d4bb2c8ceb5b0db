"""
Landmark scores, face re-scoring, detection grouping and heatmap fusion.

Each detection is decoded and scored on its own, detections are grouped by
non-maximum suppression on their refined boxes, and every group's score
images are aligned into a common frame, summed, normalized and decoded
again to give the final landmarks and occlusion scores.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from landmark_pipeline.geometry import (
    SCORE_SIZE,
    Box,
    Point2,
    box_from_landmarks,
    iou,
    map_points,
    original_frame,
    score_frame,
)
from landmark_pipeline.heatmap import (
    DEFAULT_PARAMS,
    PEAK_RATIO,
    EncodeParams,
    decode_maps,
    gaussian,
    inside_grid,
    validate_stack,
)
from landmark_pipeline.landmarks import N_LANDMARKS, RIGID_INDICES, LandmarkSet

logger = logging.getLogger(__name__)

OCC_THRESHOLD = 0.2
NMS_OVERLAP = 0.2

_GRID_CENTER = (SCORE_SIZE / 2.0, SCORE_SIZE / 2.0)


class RefinementError(ValueError):
    """Raised when a group cannot be fused (empty group or all-zero stack)."""


@dataclass(frozen=True)
class Detection:
    """Upstream face detection with the score images computed for its box."""
    box: Box
    det_score: float
    stack: np.ndarray
    image_id: str = ""
    index: int = 0


@dataclass(frozen=True)
class ScoredDetection:
    """A detection after its own stack was decoded and scored."""
    detection: Detection
    landmarks: LandmarkSet
    locations: np.ndarray
    lm_scores: np.ndarray
    face_score: float
    refined_box: Box

    @property
    def index(self) -> int:
        return self.detection.index


@dataclass(frozen=True)
class DetectionGroup:
    members: tuple
    anchor: int = 0

    @property
    def anchor_member(self) -> ScoredDetection:
        return self.members[self.anchor]


@dataclass(frozen=True)
class RefinedFace:
    """
    Final output for one face.

    Attributes:
        box: Box re-localized from the fused landmarks
        face_score: Sum of landmark scores on the fused stack
        landmarks: Fused landmarks; occ_score normalized to max-abs 1
        detection_score: Per-detection face score of the group anchor
        det_score: Upstream detector score of the group anchor
        n_members: Number of detections fused
        image_id: Source image
    """
    box: Box
    face_score: float
    landmarks: LandmarkSet
    detection_score: float
    det_score: float
    n_members: int
    image_id: str = ""
    occ_threshold: float = OCC_THRESHOLD
    extras: dict = field(default_factory=dict)

    def rigid_occluded(self) -> bool:
        """True when any pose landmark is flagged occluded or missing."""
        idx = list(RIGID_INDICES)
        return bool(np.any(self.landmarks.occ_flag[idx]) or not np.all(self.landmarks.detected[idx]))

    @property
    def pose_confidence(self) -> float:
        """Worst landmark score among the pose landmarks."""
        return float(np.min(self.landmarks.lm_score[list(RIGID_INDICES)]))


def landmark_score(
    actual: np.ndarray,
    loc: Point2,
    occluded_hint: Optional[bool] = None,
    params: EncodeParams = DEFAULT_PARAMS,
) -> float:
    """
    Score how closely a score image matches an ideal Gaussian at ``loc``.

    Returns ``-sum((|ideal| - |actual|)^2)``: 0 for a perfect blob, more
    negative the worse the match. Only magnitudes are compared, so
    ``occluded_hint`` has no effect.
    """
    del occluded_hint
    x, y = (loc.x, loc.y) if isinstance(loc, Point2) else (float(loc[0]), float(loc[1]))
    ideal = gaussian(x, y, params.sigma) * abs(params.amplitude_visible)
    diff = ideal - np.abs(np.asarray(actual, dtype=float))
    return -float(np.sum(diff * diff))


def landmark_scores(
    stack: np.ndarray,
    locs: np.ndarray,
    params: EncodeParams = DEFAULT_PARAMS,
) -> np.ndarray:
    """
    Per-landmark scores of a stack.

    Landmarks without a location (NaN, or outside the grid) are scored
    against an ideal blob at the grid center.
    """
    scores = np.zeros(len(stack))
    for i, (grid, loc) in enumerate(zip(stack, np.asarray(locs, dtype=float))):
        if not (np.all(np.isfinite(loc)) and inside_grid(*loc)):
            loc = _GRID_CENTER
        scores[i] = landmark_score(grid, loc, params=params)
    return scores


def face_score(
    stack: np.ndarray,
    locs: np.ndarray,
    params: EncodeParams = DEFAULT_PARAMS,
) -> float:
    """Refined face score: the sum of the 68 landmark scores."""
    return float(landmark_scores(stack, locs, params).sum())


def score_detection(
    det: Detection,
    params: EncodeParams = DEFAULT_PARAMS,
    peak_ratio: float = PEAK_RATIO,
) -> ScoredDetection:
    """
    Decode and score one detection on its own stack.

    Raises:
        GeometryError: If fewer than two distinct landmarks were found
    """
    stack = validate_stack(det.stack)
    locs, raw, detected = decode_maps(stack, peak_ratio)
    points = map_points(locs, score_frame(det.box), original_frame())
    scores = landmark_scores(stack, locs, params)
    landmarks = LandmarkSet(
        points=points,
        occ_score=raw,
        occ_flag=detected & (raw < 0.0),
        detected=detected,
        lm_score=scores,
    )
    return ScoredDetection(
        detection=det,
        landmarks=landmarks,
        locations=locs,
        lm_scores=scores,
        face_score=float(scores.sum()),
        refined_box=box_from_landmarks(landmarks),
    )


def nms_group(dets: Sequence[ScoredDetection], overlap: float = NMS_OVERLAP) -> List[DetectionGroup]:
    """
    Greedy non-maximum-suppression grouping.

    Detections are sorted by descending face score (ties by input index);
    the best remaining detection absorbs every remaining detection whose
    refined box overlaps it by at least ``overlap`` IOU.
    """
    remaining = sorted(range(len(dets)), key=lambda i: (-dets[i].face_score, dets[i].index, i))
    groups = []
    while remaining:
        best = remaining.pop(0)
        members = [dets[best]]
        keep = []
        for i in remaining:
            if iou(dets[i].refined_box, dets[best].refined_box) >= overlap:
                members.append(dets[i])
            else:
                keep.append(i)
        remaining = keep
        groups.append(DetectionGroup(members=tuple(members), anchor=0))
    logger.debug(f"Grouped {len(dets)} detections into {len(groups)} groups")
    return groups


def resample_stack(stack: np.ndarray, src_box: Box, dst_box: Box) -> np.ndarray:
    """
    Resample a stack computed for ``src_box`` into the score frame of ``dst_box``.

    Target pixel centers are mapped into the source score frame and sampled
    bilinearly; samples falling outside the source grid are zero.
    """
    centers = np.arange(SCORE_SIZE, dtype=float) + 0.5
    xs = map_points(np.column_stack([centers, np.zeros_like(centers)]), score_frame(dst_box), score_frame(src_box))[:, 0]
    ys = map_points(np.column_stack([np.zeros_like(centers), centers]), score_frame(dst_box), score_frame(src_box))[:, 1]

    inside = ((ys >= 0) & (ys < SCORE_SIZE))[:, None] & ((xs >= 0) & (xs < SCORE_SIZE))[None, :]
    rows, cols = np.meshgrid(ys - 0.5, xs - 0.5, indexing="ij")
    coords = np.array([rows, cols])

    out = np.zeros_like(stack, dtype=float)
    for i, grid in enumerate(stack):
        out[i] = ndimage.map_coordinates(grid, coords, order=1, mode="nearest")
    out[:, ~inside] = 0.0
    return out


def align_and_sum(group: DetectionGroup) -> np.ndarray:
    """
    Align every member's score images to the anchor and sum them.

    The common frame is a 64x64 grid over the anchor's original (unrefined)
    detection box. The sum is not divided by the member count.
    """
    if not group.members:
        raise RefinementError("Cannot fuse an empty group")
    anchor_box = group.anchor_member.detection.box
    fused = np.zeros((N_LANDMARKS, SCORE_SIZE, SCORE_SIZE))
    for member in group.members:
        stack = validate_stack(member.detection.stack)
        if member.detection.box == anchor_box:
            fused += stack
        else:
            fused += resample_stack(stack, member.detection.box, anchor_box)
    return fused


def normalize_stack(s: np.ndarray) -> np.ndarray:
    """
    Divide a stack by its global maximum magnitude, keeping signs.

    Raises:
        RefinementError: If the stack is identically zero
    """
    s = np.asarray(s, dtype=float)
    peak = float(np.max(np.abs(s))) if s.size else 0.0
    if not np.isfinite(peak) or peak <= 0.0:
        raise RefinementError("Fused stack is all zeros; no landmark is visible")
    return s / peak


def refine(
    group: DetectionGroup,
    occ_threshold: float = OCC_THRESHOLD,
    params: EncodeParams = DEFAULT_PARAMS,
    peak_ratio: float = PEAK_RATIO,
) -> RefinedFace:
    """
    Fuse a detection group into one refined face.

    Args:
        group: NMS group; its anchor defines the fusion frame
        occ_threshold: Landmarks with a fused occlusion score below this are
            flagged occluded
        params: Gaussian parameters for the landmark scores
        peak_ratio: Relative threshold for decoding

    Returns:
        RefinedFace with fused landmarks, occlusion flags, box and score

    Raises:
        RefinementError: If the fused stack is all zeros
        GeometryError: If fewer than two distinct landmarks survive
    """
    fused = normalize_stack(align_and_sum(group))
    locs, raw, detected = decode_maps(fused, peak_ratio)

    anchor = group.anchor_member
    points = map_points(locs, score_frame(anchor.detection.box), original_frame())
    scores = landmark_scores(fused, locs, params)
    landmarks = LandmarkSet(
        points=points,
        occ_score=raw,
        occ_flag=raw < occ_threshold,
        detected=detected,
        lm_score=scores,
    )
    return RefinedFace(
        box=box_from_landmarks(landmarks),
        face_score=float(scores.sum()),
        landmarks=landmarks,
        detection_score=anchor.face_score,
        det_score=anchor.detection.det_score,
        n_members=len(group.members),
        image_id=anchor.detection.image_id,
        occ_threshold=occ_threshold,
    )


def merge_detections(*lists: Sequence[Detection]) -> List[Detection]:
    """Concatenate the outputs of several detectors, re-indexing in order."""
    merged = []
    for dets in lists:
        for det in dets:
            merged.append(Detection(det.box, det.det_score, det.stack, det.image_id, len(merged)))
    return merged
