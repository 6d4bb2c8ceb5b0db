"""
State schema for the landmark refinement workflow.
"""

from typing import List, Optional, Tuple, TypedDict

from landmark_pipeline.pose import PoseAngles
from landmark_pipeline.scoring import Detection, DetectionGroup, RefinedFace, ScoredDetection


class PipelineState(TypedDict):
    """
    State for one image passing through the refinement workflow.

    Attributes:
        detections: Upstream detections with their score images
        scored: Detections that decoded to landmarks, with their scores
        groups: NMS groups of scored detections
        faces: Refined faces, best fused score first
        poses: Head pose per refined face (None where unavailable)
        image_size: (width, height) of the source image, if known
    """
    detections: List[Detection]
    scored: List[ScoredDetection]
    groups: List[DetectionGroup]
    faces: List[RefinedFace]
    poses: List[Optional[PoseAngles]]
    image_size: Optional[Tuple[int, int]]
