"""
Node functions for the landmark refinement workflow.

Each node is one stage: per-detection scoring, NMS grouping, heatmap fusion
and head pose.
"""

import logging
from typing import Optional

from landmark_pipeline.geometry import GeometryError
from landmark_pipeline.heatmap import DEFAULT_PARAMS, EncodeParams, HeatmapError
from landmark_pipeline.pose import CameraIntrinsics, FaceModel3D, PoseError, estimate_pose
from landmark_pipeline.scoring import (
    NMS_OVERLAP,
    OCC_THRESHOLD,
    RefinementError,
    nms_group,
    refine,
    score_detection,
)
from landmark_pipeline.state import PipelineState

logger = logging.getLogger(__name__)


class RefinementNodes:
    """
    Container for the workflow node functions.

    Holds the settings every stage needs. Failures of a single detection or
    group are logged and skipped; they never abort the image.
    """

    def __init__(
        self,
        occ_threshold: float = OCC_THRESHOLD,
        nms_overlap: float = NMS_OVERLAP,
        params: EncodeParams = DEFAULT_PARAMS,
        model: Optional[FaceModel3D] = None,
        focal: Optional[float] = None,
        exclude_occluded: bool = False,
    ):
        self.occ_threshold = occ_threshold
        self.nms_overlap = nms_overlap
        self.params = params
        self.model = model
        self.focal = focal
        self.exclude_occluded = exclude_occluded

    def score_detections(self, state: PipelineState) -> dict:
        """Node: decode and score every detection on its own stack."""
        scored = []
        for det in state["detections"]:
            try:
                scored.append(score_detection(det, self.params))
            except (HeatmapError, GeometryError) as e:
                logger.warning(f"Dropping detection {det.index} of '{det.image_id}': {e}")
        logger.debug(f"Scored {len(scored)}/{len(state['detections'])} detections")
        return {"scored": scored}

    def group_detections(self, state: PipelineState) -> dict:
        """Node: group the scored detections by NMS on their refined boxes."""
        return {"groups": nms_group(state["scored"], self.nms_overlap)}

    def fuse_groups(self, state: PipelineState) -> dict:
        """Node: fuse each group's score images into one refined face."""
        faces = []
        for group in state["groups"]:
            try:
                faces.append(refine(group, self.occ_threshold, self.params))
            except (RefinementError, GeometryError) as e:
                anchor = group.anchor_member.detection
                logger.warning(f"Skipping group anchored at detection {anchor.index} of '{anchor.image_id}': {e}")
        faces.sort(key=lambda f: -f.face_score)
        return {"faces": faces}

    def estimate_poses(self, state: PipelineState) -> dict:
        """Node: head pose for each refined face; None where it cannot be estimated."""
        size = state.get("image_size")
        if size is None:
            logger.debug("No image size given; skipping pose")
            return {"poses": [None] * len(state["faces"])}

        cam = CameraIntrinsics.for_image(size[0], size[1], self.focal)
        poses = []
        for face in state["faces"]:
            try:
                poses.append(estimate_pose(face.landmarks, cam, self.model, self.exclude_occluded))
            except PoseError as e:
                logger.warning(f"Pose unavailable for a face in '{face.image_id}': {e}")
                poses.append(None)
        return {"poses": poses}
