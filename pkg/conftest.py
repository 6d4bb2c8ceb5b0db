"""
Shared fixtures for the landmark pipeline test suite.
"""

import numpy as np
import pytest

from landmark_pipeline.geometry import Box, box_from_landmarks, map_points, original_frame, score_frame
from landmark_pipeline.heatmap import encode_stack, states_from_flags
from landmark_pipeline.landmarks import N_LANDMARKS, LandmarkSet, canonical_face
from landmark_pipeline.pose import load_face_model
from landmark_pipeline.scoring import Detection


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def face_points():
    """Upright synthetic face centered in a 640x480 image."""
    return canonical_face((320.0, 240.0), 80.0)


@pytest.fixture
def face_model():
    return load_face_model()


def square_detection_box(points, margin: float = 1.25) -> Box:
    return box_from_landmarks(points).square().expand((margin - 1.0) / 2.0)


@pytest.fixture
def make_detection():
    """Factory: clean encoded detection of original-frame points inside ``box``."""

    def _make(points, box=None, occ_flag=None, image_id="img", index=0, det_score=1.0):
        box = box or square_detection_box(points)
        flags = np.zeros(N_LANDMARKS, dtype=bool) if occ_flag is None else np.asarray(occ_flag, dtype=bool)
        score_pts = map_points(points, original_frame(), score_frame(box))
        stack = encode_stack(score_pts, states_from_flags(flags))
        return Detection(box, det_score, stack, image_id, index)

    return _make


@pytest.fixture
def detection_box():
    """Factory: square detector box around a set of original-frame points."""
    return square_detection_box
