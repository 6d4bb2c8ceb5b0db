"""
Metrics harness: detection precision/recall at PASCAL overlap, occlusion
precision/recall, yaw accuracy and eye/mouth openness features.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from landmark_pipeline.geometry import Box, iou
from landmark_pipeline.landmarks import (
    INNER_MOUTH_RING,
    LEFT_EYE,
    LEFT_EYE_ROLES,
    MOUTH,
    RIGHT_EYE,
    RIGHT_EYE_ROLES,
    LandmarkSet,
)

logger = logging.getLogger(__name__)

PASCAL_IOU = 0.5
YAW_SUCCESS_DEG = 15.0
MOUTH_OCCLUDED_FRACTION = 0.5


class MetricError(ValueError):
    """Raised when a metric is undefined for the given inputs."""


@dataclass(frozen=True)
class ScoredFace:
    """A predicted face as seen by the harness."""
    image_id: str
    box: Box
    score: float
    landmarks: Optional[LandmarkSet] = None
    yaw: Optional[float] = None


@dataclass(frozen=True)
class AnnotatedFace:
    """A ground-truth face."""
    image_id: str
    box: Box
    landmarks: Optional[LandmarkSet] = None
    yaw: Optional[float] = None


@dataclass(frozen=True)
class MatchResult:
    """
    Matching of one image's detections against its ground truth.

    Detections are stored ranked by descending score.

    Attributes:
        scores: Ranked detection scores
        matched_gt: Matched gt index per ranked detection, -1 when unmatched
        gt_matched: Per-gt matched flag
        order: Input index of each ranked detection
    """
    scores: np.ndarray
    matched_gt: np.ndarray
    gt_matched: np.ndarray
    order: np.ndarray

    @property
    def true_positive(self) -> np.ndarray:
        return self.matched_gt >= 0

    @property
    def n_gt(self) -> int:
        return len(self.gt_matched)


@dataclass(frozen=True)
class PRCurve:
    """Precision and recall per threshold (all arrays the same length)."""
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "threshold": self.thresholds,
            "precision": self.precision,
            "recall": self.recall,
        })


@dataclass(frozen=True)
class YawMetrics:
    """
    Yaw accuracy.

    Attributes:
        detection_rate: Matched gt faces over all gt faces
        success_rate: Matched faces with |yaw error| <= tolerance, over matched faces
        mean_abs_err: Mean |yaw error| over matched faces (degrees)
        std_abs_err: Standard deviation of |yaw error| (degrees)
        valid: False when no face was matched (the rates are NaN)
    """
    detection_rate: float
    success_rate: float
    mean_abs_err: float
    std_abs_err: float
    n_gt: int
    n_matched: int
    valid: bool = True


@dataclass(frozen=True)
class MouthOpening:
    area: float
    normalized: float
    occluded: bool


def match(
    det_boxes: Sequence[Box],
    det_scores: Sequence[float],
    gt_boxes: Sequence[Box],
    iou_thresh: float = PASCAL_IOU,
) -> MatchResult:
    """
    Greedy PASCAL matching.

    Detections are visited by descending score (ties by input order); each
    takes the unmatched gt box with the highest IOU, provided that IOU is at
    least ``iou_thresh``. Every gt box is matched at most once.
    """
    scores = np.asarray(det_scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    matched_gt = np.full(len(order), -1, dtype=int)
    gt_matched = np.zeros(len(gt_boxes), dtype=bool)

    for rank, det_idx in enumerate(order):
        best, best_iou = -1, iou_thresh
        for g, gt in enumerate(gt_boxes):
            if gt_matched[g]:
                continue
            overlap = iou(det_boxes[det_idx], gt)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = g, overlap
        if best >= 0:
            matched_gt[rank] = best
            gt_matched[best] = True
    return MatchResult(scores[order], matched_gt, gt_matched, order)


def match_dataset(
    predictions: Sequence[ScoredFace],
    truths: Sequence[AnnotatedFace],
    iou_thresh: float = PASCAL_IOU,
) -> Dict[str, MatchResult]:
    """Per-image matching over a dataset; images without predictions still count their gt."""
    images = list(dict.fromkeys([t.image_id for t in truths] + [p.image_id for p in predictions]))
    results = {}
    for image_id in images:
        preds = [p for p in predictions if p.image_id == image_id]
        gts = [t for t in truths if t.image_id == image_id]
        results[image_id] = match(
            [p.box for p in preds], [p.score for p in preds], [t.box for t in gts], iou_thresh,
        )
    return results


def pr_curve(results: Sequence[MatchResult]) -> PRCurve:
    """
    Pooled detection precision/recall over every distinct score.

    At threshold t the detections with score >= t are predicted. Thresholds
    are listed in descending order, so recall is non-decreasing along the
    arrays. With no detections the curve is a single point (inf, 1, 0).

    Raises:
        MetricError: If there is no ground-truth face
    """
    if isinstance(results, MatchResult):
        results = [results]
    results = list(results.values()) if isinstance(results, dict) else list(results)
    n_gt = sum(r.n_gt for r in results)
    if n_gt == 0:
        raise MetricError("Precision/recall undefined without ground-truth faces")

    scores = np.concatenate([r.scores for r in results]) if results else np.zeros(0)
    tp = np.concatenate([r.true_positive for r in results]) if results else np.zeros(0, dtype=bool)
    if len(scores) == 0:
        return PRCurve(np.array([np.inf]), np.array([1.0]), np.array([0.0]))

    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)

    thresholds = np.unique(scores)[::-1]
    # Last ranked position whose score is still >= the threshold.
    last = np.searchsorted(-scores, -thresholds, side="right") - 1
    n_tp, n_fp = cum_tp[last], cum_fp[last]
    return PRCurve(thresholds, n_tp / (n_tp + n_fp), n_tp / n_gt)


def average_precision(curve: PRCurve) -> float:
    """All-point interpolated average precision (area under the precision envelope)."""
    order = np.argsort(curve.recall, kind="stable")
    mrec = np.concatenate(([0.0], curve.recall[order], [1.0]))
    mpre = np.concatenate(([0.0], curve.precision[order], [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def occlusion_pr(
    pred_scores: Sequence[float],
    gt_flags: Sequence[bool],
    thresholds: Sequence[float],
) -> PRCurve:
    """
    Occlusion precision/recall with occluded as the positive class.

    A landmark is predicted occluded when its score is below the threshold.
    Missing scores (NaN) count as 0. Precision is 1 when nothing is predicted.

    Raises:
        MetricError: If the ground truth has no occluded landmark
    """
    scores = np.nan_to_num(np.asarray(pred_scores, dtype=float).ravel(), nan=0.0)
    truth = np.asarray(gt_flags, dtype=bool).ravel()
    if scores.shape != truth.shape:
        raise MetricError(f"{len(scores)} scores for {len(truth)} ground-truth flags")
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise MetricError("Occlusion recall undefined: no occluded landmark in the ground truth")

    thresholds = np.asarray(thresholds, dtype=float)
    precision, recall = np.zeros(len(thresholds)), np.zeros(len(thresholds))
    for k, theta in enumerate(thresholds):
        predicted = scores < theta
        n_pred = int(predicted.sum())
        n_tp = int((predicted & truth).sum())
        precision[k] = n_tp / n_pred if n_pred else 1.0
        recall[k] = n_tp / n_pos
    return PRCurve(thresholds, precision, recall)


def evaluate_occlusion(
    predictions: Sequence[ScoredFace],
    truths: Sequence[AnnotatedFace],
    thresholds: Sequence[float],
    iou_thresh: float = PASCAL_IOU,
) -> PRCurve:
    """
    Occlusion precision/recall over the landmarks of matched faces.

    Faces are matched per image at PASCAL overlap; landmark correspondences
    of every matched pair are pooled.
    """
    scores, flags = [], []
    for image_id, result in match_dataset(predictions, truths, iou_thresh).items():
        preds = [p for p in predictions if p.image_id == image_id]
        gts = [t for t in truths if t.image_id == image_id]
        for det_idx, gt_idx in zip(result.order, result.matched_gt):
            if gt_idx < 0:
                continue
            pred, gt = preds[det_idx], gts[gt_idx]
            if pred.landmarks is None or gt.landmarks is None:
                continue
            usable = gt.landmarks.detected
            scores.append(np.where(pred.landmarks.detected, pred.landmarks.occ_score, 0.0)[usable])
            flags.append(gt.landmarks.occ_flag[usable])
    if not scores:
        raise MetricError("No matched face carries landmarks")
    logger.info(f"Occlusion evaluation over {len(scores)} matched faces")
    return occlusion_pr(np.concatenate(scores), np.concatenate(flags), thresholds)


def _wrap_degrees(delta: np.ndarray) -> np.ndarray:
    return (np.asarray(delta, dtype=float) + 180.0) % 360.0 - 180.0


def yaw_metrics(
    pred: Sequence[Optional[float]],
    gt: Sequence[float],
    tolerance: float = YAW_SUCCESS_DEG,
) -> YawMetrics:
    """
    Yaw detection/success rates and absolute-error statistics.

    Args:
        pred: Predicted yaw per gt face, None where the face was not
            detected (or has no pose)
        gt: Annotated yaw per face
        tolerance: Success threshold in degrees

    Raises:
        MetricError: If there are no gt faces or the lists differ in length
    """
    if len(gt) == 0:
        raise MetricError("Yaw metrics undefined without ground-truth faces")
    if len(pred) != len(gt):
        raise MetricError(f"{len(pred)} predictions for {len(gt)} ground-truth faces")

    matched = [(p, g) for p, g in zip(pred, gt) if p is not None and np.isfinite(p)]
    rate = len(matched) / len(gt)
    if not matched:
        logger.warning("No matched face for yaw metrics")
        return YawMetrics(rate, float("nan"), float("nan"), float("nan"), len(gt), 0, valid=False)

    err = np.abs(_wrap_degrees([p - g for p, g in matched]))
    return YawMetrics(
        detection_rate=rate,
        success_rate=float(np.mean(err <= tolerance)),
        mean_abs_err=float(err.mean()),
        std_abs_err=float(err.std()),
        n_gt=len(gt),
        n_matched=len(matched),
    )


def evaluate_yaw(
    predictions: Sequence[ScoredFace],
    truths: Sequence[AnnotatedFace],
    iou_thresh: float = PASCAL_IOU,
    tolerance: float = YAW_SUCCESS_DEG,
) -> YawMetrics:
    """Match faces at PASCAL overlap, then compute yaw metrics over every annotated face."""
    truths = [t for t in truths if t.yaw is not None]
    per_gt: Dict[int, Optional[float]] = {}
    for image_id, result in match_dataset(predictions, truths, iou_thresh).items():
        preds = [p for p in predictions if p.image_id == image_id]
        gt_ids = [k for k, t in enumerate(truths) if t.image_id == image_id]
        for det_idx, gt_idx in zip(result.order, result.matched_gt):
            if gt_idx >= 0:
                per_gt[gt_ids[gt_idx]] = preds[det_idx].yaw
    return yaw_metrics([per_gt.get(k) for k in range(len(truths))], [t.yaw for t in truths], tolerance)


def _eye_ratio(lms: LandmarkSet, roles) -> Optional[float]:
    outer, inner, (top_a, bottom_a), (top_b, bottom_b) = roles
    idx = [outer, inner, top_a, bottom_a, top_b, bottom_b]
    if not lms.detected[idx].all() or lms.occ_flag[idx].any():
        return None
    p = lms.points
    width = np.linalg.norm(p[inner] - p[outer])
    if width <= 0:
        return None
    lids = (np.linalg.norm(p[top_a] - p[bottom_a]) + np.linalg.norm(p[top_b] - p[bottom_b])) / 2.0
    return float(lids / width)


def eye_opening(lms: LandmarkSet) -> Dict[str, Optional[float]]:
    """
    Eye opening per eye: mean lid distance over corner distance.

    An eye with any undetected or occluded landmark gets None.
    """
    return {"left": _eye_ratio(lms, LEFT_EYE_ROLES), "right": _eye_ratio(lms, RIGHT_EYE_ROLES)}


def polygon_area(points: np.ndarray) -> float:
    """Shoelace area of an ordered polygon (self-intersecting input is taken as-is)."""
    pts = np.asarray(points, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def inter_ocular_distance(lms: LandmarkSet) -> float:
    left = lms.points[list(LEFT_EYE)][lms.detected[list(LEFT_EYE)]]
    right = lms.points[list(RIGHT_EYE)][lms.detected[list(RIGHT_EYE)]]
    if len(left) == 0 or len(right) == 0:
        raise MetricError("Inter-ocular distance needs both eyes")
    return float(np.linalg.norm(left.mean(axis=0) - right.mean(axis=0)))


def mouth_opening(
    lms: LandmarkSet,
    occluded_fraction: float = MOUTH_OCCLUDED_FRACTION,
) -> MouthOpening:
    """
    Area enclosed by the six non-corner inner-mouth landmarks.

    The area is normalized by the squared inter-ocular distance. The mouth
    counts as occluded when more than ``occluded_fraction`` of the mouth
    landmarks are flagged.

    Raises:
        MetricError: If an inner-mouth landmark is missing or the eyes are unusable
    """
    ring = list(INNER_MOUTH_RING)
    if not lms.detected[ring].all():
        raise MetricError("Mouth opening needs all six inner-mouth landmarks")
    area = polygon_area(lms.points[ring])
    iod = inter_ocular_distance(lms)
    if iod <= 0:
        raise MetricError("Inter-ocular distance is zero")
    occluded = float(np.mean(lms.occ_flag[list(MOUTH)])) > occluded_fraction
    return MouthOpening(area=area, normalized=area / iod ** 2, occluded=occluded)


def minmax_normalize(series: Sequence[float]) -> np.ndarray:
    """Rescale a time series to [0, 1] by its observed range, ignoring NaN."""
    values = np.asarray(series, dtype=float)
    finite = np.isfinite(values)
    if not finite.any():
        return values.copy()
    lo, hi = values[finite].min(), values[finite].max()
    if hi == lo:
        return np.where(finite, 0.0, np.nan)
    return (values - lo) / (hi - lo)


def feature_frame(sequence: Sequence[LandmarkSet]) -> pd.DataFrame:
    """
    Eye and mouth openness over a landmark sequence, one row per frame.

    Columns hold the raw values and their min-max normalized versions.
    """
    rows = []
    for frame_idx, lms in enumerate(sequence):
        eyes = eye_opening(lms)
        try:
            mouth = mouth_opening(lms)
            mouth_value, mouth_occluded = mouth.normalized, mouth.occluded
        except MetricError as e:
            logger.debug(f"Frame {frame_idx}: {e}")
            mouth_value, mouth_occluded = np.nan, True
        rows.append({
            "frame": frame_idx,
            "left_eye": np.nan if eyes["left"] is None else eyes["left"],
            "right_eye": np.nan if eyes["right"] is None else eyes["right"],
            "mouth": mouth_value,
            "mouth_occluded": mouth_occluded,
        })
    frame = pd.DataFrame(rows, columns=["frame", "left_eye", "right_eye", "mouth", "mouth_occluded"])
    for col in ("left_eye", "right_eye", "mouth"):
        frame[f"{col}_norm"] = minmax_normalize(frame[col].to_numpy(dtype=float))
    return frame
