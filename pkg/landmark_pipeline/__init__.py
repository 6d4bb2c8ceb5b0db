"""
Occlusion-aware Facial Landmark Pipeline

This package turns per-landmark signed heatmaps into refined landmarks,
occlusion flags, face scores and head pose, and provides the training-sample
generator and evaluation harness around them.
"""

from landmark_pipeline.builder import LandmarkPipeline, create_pipeline
from landmark_pipeline.state import PipelineState

__all__ = ["LandmarkPipeline", "create_pipeline", "PipelineState"]
