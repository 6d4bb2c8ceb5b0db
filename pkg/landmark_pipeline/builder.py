"""
Refinement pipeline builder.

This module wires the refinement stages into a LangGraph workflow.
"""

import logging
import os
from typing import List, Optional, Sequence, Tuple

from dotenv import load_dotenv
from langgraph.graph import END, START, StateGraph

from landmark_pipeline.heatmap import EncodeParams
from landmark_pipeline.nodes import RefinementNodes
from landmark_pipeline.pose import PoseAngles, load_face_model
from landmark_pipeline.scoring import Detection, RefinedFace
from landmark_pipeline.state import PipelineState

load_dotenv()

logger = logging.getLogger(__name__)


def _env_float(name: str, default: str) -> float:
    return float(os.getenv(name, default))


class LandmarkPipeline:
    """
    Landmark refinement for the detections of one image.

    The workflow consists of four nodes:
    1. Score: decode every detection and score its landmarks
    2. Group: NMS over the refined boxes
    3. Fuse: align, sum and decode each group's score images
    4. Pose: POSIT head pose from the rigid landmarks

    Unset arguments fall back to LANDMARK_* environment variables, then to
    the built-in defaults.
    """

    def __init__(
        self,
        occ_threshold: Optional[float] = None,
        nms_overlap: Optional[float] = None,
        sigma: Optional[float] = None,
        focal: Optional[float] = None,
        model_path: Optional[str] = None,
        exclude_occluded: Optional[bool] = None,
    ):
        """
        Initialize the pipeline.

        Args:
            occ_threshold: Fused occlusion score below which a landmark is occluded (default 0.2)
            nms_overlap: IOU at which detections are grouped (default 0.2)
            sigma: Gaussian width of the landmark labels (default 1.5)
            focal: Camera focal length in pixels (default: image width)
            model_path: 3D face model CSV (default: the shipped model)
            exclude_occluded: Drop occluded rigid landmarks from pose
        """
        self.occ_threshold = occ_threshold if occ_threshold is not None else _env_float("LANDMARK_OCC_THRESHOLD", "0.2")
        self.nms_overlap = nms_overlap if nms_overlap is not None else _env_float("LANDMARK_NMS_OVERLAP", "0.2")
        self.sigma = sigma if sigma is not None else _env_float("LANDMARK_SIGMA", "1.5")
        env_focal = os.getenv("LANDMARK_FOCAL")
        self.focal = focal if focal is not None else (float(env_focal) if env_focal else None)
        model_path = model_path or os.getenv("LANDMARK_MODEL") or None
        if exclude_occluded is None:
            exclude_occluded = os.getenv("LANDMARK_POSE_EXCLUDE_OCCLUDED", "false").lower() in ("1", "true", "yes")
        self.exclude_occluded = exclude_occluded

        self.nodes = RefinementNodes(
            occ_threshold=self.occ_threshold,
            nms_overlap=self.nms_overlap,
            params=EncodeParams(sigma=self.sigma),
            model=load_face_model(model_path),
            focal=self.focal,
            exclude_occluded=self.exclude_occluded,
        )
        self._graph = self._build_graph()
        logger.debug(f"Pipeline ready (occ_threshold={self.occ_threshold}, nms_overlap={self.nms_overlap}, sigma={self.sigma})")

    def _build_graph(self):
        """
        Workflow:
        START -> score -> group -> fuse -> pose -> END
        """
        workflow = StateGraph(PipelineState)

        workflow.add_node("score", self.nodes.score_detections)
        workflow.add_node("group", self.nodes.group_detections)
        workflow.add_node("fuse", self.nodes.fuse_groups)
        workflow.add_node("pose", self.nodes.estimate_poses)

        workflow.add_edge(START, "score")
        workflow.add_edge("score", "group")
        workflow.add_edge("group", "fuse")
        workflow.add_edge("fuse", "pose")
        workflow.add_edge("pose", END)
        return workflow.compile()

    def refine(
        self,
        detections: Sequence[Detection],
        image_size: Optional[Tuple[int, int]] = None,
    ) -> List[Tuple[RefinedFace, Optional[PoseAngles]]]:
        """
        Refine the detections of one image.

        Args:
            detections: Detections of a single image
            image_size: (width, height), needed for pose

        Returns:
            (face, pose) pairs, best fused face score first
        """
        initial_state: PipelineState = {
            "detections": list(detections),
            "scored": [],
            "groups": [],
            "faces": [],
            "poses": [],
            "image_size": image_size,
        }
        final_state = self._graph.invoke(initial_state)
        faces = final_state["faces"]
        logger.info(f"Refined {len(detections)} detections into {len(faces)} faces")
        return list(zip(faces, final_state["poses"]))


def create_pipeline(
    occ_threshold: Optional[float] = None,
    nms_overlap: Optional[float] = None,
    sigma: Optional[float] = None,
    focal: Optional[float] = None,
    model_path: Optional[str] = None,
    exclude_occluded: Optional[bool] = None,
) -> LandmarkPipeline:
    """Factory function for a refinement pipeline."""
    return LandmarkPipeline(
        occ_threshold=occ_threshold,
        nms_overlap=nms_overlap,
        sigma=sigma,
        focal=focal,
        model_path=model_path,
        exclude_occluded=exclude_occluded,
    )
