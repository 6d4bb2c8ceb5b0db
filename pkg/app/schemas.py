"""
Pydantic schemas for the pipeline's records and settings.
"""

import math
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from landmark_pipeline.geometry import Box, box_from_landmarks
from landmark_pipeline.landmarks import N_LANDMARKS, LandmarkSet


def _check_box(values: List[float]) -> List[float]:
    if len(values) != 4:
        raise ValueError(f"box needs 4 values [x, y, w, h], got {len(values)}")
    if not all(math.isfinite(v) for v in values):
        raise ValueError("box fields must be finite")
    if values[2] <= 0 or values[3] <= 0:
        raise ValueError("box width and height must be positive")
    return values


class PoseRecord(BaseModel):
    """Head pose in degrees."""
    yaw: float = Field(..., description="Positive when the face turns to its left")
    pitch: float = Field(..., description="Pitch angle")
    roll: float = Field(..., description="Roll angle")


class DetectionRecord(BaseModel):
    """One detection per JSON line; refined output adds the landmark fields."""
    image_id: str = Field(..., description="Identifier of the source image")
    box: List[float] = Field(..., description="Detection box [x, y, w, h] in original pixels")
    det_score: float = Field(0.0, description="Upstream detector score")
    heatmaps: Optional[str] = Field(None, description="Heatmap file, relative to the JSONL file")
    image_size: Optional[Tuple[int, int]] = Field(None, description="(width, height) of the source image")

    landmarks: Optional[List[Optional[Tuple[float, float]]]] = Field(
        None, description="68 points in original pixels; null where undetected"
    )
    occ_scores: Optional[List[float]] = Field(None, description="Signed occlusion score per landmark")
    occ_flags: Optional[List[bool]] = Field(None, description="True where the landmark is occluded")
    face_score: Optional[float] = Field(None, description="Fused face score (sum of landmark scores)")
    detection_score: Optional[float] = Field(None, description="Per-detection face score of the group anchor")
    members: Optional[int] = Field(None, description="Number of detections fused")
    pose: Optional[PoseRecord] = Field(None, description="Head pose, if available")
    pose_reliable: Optional[bool] = Field(None, description="False when a pose landmark is occluded or missing")
    pose_confidence: Optional[float] = Field(None, description="Worst landmark score among the pose landmarks")

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "image_id": "img_0001",
                "box": [120.0, 80.0, 200.0, 200.0],
                "det_score": 0.97,
                "heatmaps": "heatmaps/img_0001_0.ohm",
                "image_size": [640, 480],
            }
        }
    )

    @field_validator("box")
    @classmethod
    def _valid_box(cls, v):
        return _check_box(v)

    @field_validator("landmarks", "occ_scores", "occ_flags")
    @classmethod
    def _length(cls, v):
        if v is not None and len(v) != N_LANDMARKS:
            raise ValueError(f"expected {N_LANDMARKS} entries, got {len(v)}")
        return v

    def to_box(self) -> Box:
        return Box(*self.box)

    def to_landmarks(self) -> LandmarkSet:
        """Landmark set of a refined record."""
        if self.landmarks is None:
            raise ValueError(f"record for '{self.image_id}' carries no landmarks")
        points = np.array([p if p is not None else (np.nan, np.nan) for p in self.landmarks], dtype=float)
        detected = np.array([p is not None for p in self.landmarks])
        flags = np.array(self.occ_flags if self.occ_flags is not None else [False] * N_LANDMARKS, dtype=bool)
        scores = np.array(self.occ_scores, dtype=float) if self.occ_scores is not None else np.where(flags, -1.0, 1.0)
        return LandmarkSet(points=points, occ_score=scores, occ_flag=flags & detected, detected=detected)


class GroundTruthRecord(BaseModel):
    """One annotated face per JSON line."""
    image_id: str = Field(..., description="Identifier of the source image")
    landmarks: List[Tuple[float, float]] = Field(..., description="68 annotated points in original pixels")
    occ_flags: Optional[List[bool]] = Field(None, description="True where the landmark is occluded")
    box: Optional[List[float]] = Field(None, description="Face box; derived from the landmarks when absent")
    yaw: Optional[float] = Field(None, description="Annotated yaw in degrees")
    pitch: Optional[float] = Field(None, description="Annotated pitch in degrees")
    roll: Optional[float] = Field(None, description="Annotated roll in degrees")

    @field_validator("landmarks", "occ_flags")
    @classmethod
    def _length(cls, v):
        if v is not None and len(v) != N_LANDMARKS:
            raise ValueError(f"expected {N_LANDMARKS} entries, got {len(v)}")
        return v

    @field_validator("box")
    @classmethod
    def _valid_box(cls, v):
        return v if v is None else _check_box(v)

    def to_landmarks(self) -> LandmarkSet:
        return LandmarkSet.from_points(self.landmarks, self.occ_flags)

    def to_box(self) -> Box:
        return Box(*self.box) if self.box is not None else box_from_landmarks(self.to_landmarks())


class SampleRecord(BaseModel):
    """A generated training window."""
    image: str = Field(..., description="PNG of the 256x256 window")
    labels: str = Field(..., description="Heatmap file with the 68 label maps")
    source: str = Field(..., description="Source image")
    window: List[float] = Field(..., description="Window box [x, y, w, h] in the preprocessed source frame")
    positive: bool = Field(..., description="True for face windows")
    occ_flags: Optional[List[bool]] = Field(None, description="Occlusion labels of a positive window")


class PipelineSettings(BaseModel):
    """Validated configuration shared by every subcommand."""
    model_config = ConfigDict(extra="forbid")

    occ_threshold: float = Field(0.2, description="Fused occlusion score below which a landmark is occluded")
    nms_overlap: float = Field(0.2, ge=0, le=1, description="IOU at which detections are grouped")
    sigma: float = Field(1.5, gt=0, description="Gaussian label width in score pixels")
    focal: Optional[float] = Field(None, gt=0, description="Focal length in pixels (default: image width)")
    model: Optional[str] = Field(None, description="3D face model CSV (default: shipped model)")
    seed: int = Field(0, description="Random seed")
    jobs: int = Field(1, ge=1, description="Worker processes")
    pascal_iou: float = Field(0.5, gt=0, le=1, description="Overlap for matching faces to ground truth")
    pose_exclude_occluded: bool = Field(False, description="Drop occluded rigid landmarks from pose")
