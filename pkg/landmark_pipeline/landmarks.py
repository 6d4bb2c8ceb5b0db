"""
The 68-point Multi-PIE / 300-W landmark scheme and the LandmarkSet container.

Indices in this module are 0-based; the 1-based numbering used by the pts
format and the annotation guidelines is ``index + 1``.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from landmark_pipeline.geometry import CoordFrame, original_frame

N_LANDMARKS = 68

NOSE_BRIDGE = tuple(range(27, 31))
LEFT_EYE = tuple(range(36, 42))
RIGHT_EYE = tuple(range(42, 48))
OUTER_MOUTH = tuple(range(48, 60))
INNER_MOUTH = tuple(range(60, 68))
MOUTH = OUTER_MOUTH + INNER_MOUTH

# Inner-mouth points without the two corners, in polygon order.
INNER_MOUTH_RING = (61, 62, 63, 65, 66, 67)

# (corner, corner, (upper, lower), (upper, lower)) per eye.
LEFT_EYE_ROLES = (36, 39, (37, 41), (38, 40))
RIGHT_EYE_ROLES = (42, 45, (43, 47), (44, 46))

# Eye corners, nose tip, nose corners, chin.
RIGID_INDICES = (36, 39, 42, 45, 30, 31, 35, 8)


def _mirror_table() -> np.ndarray:
    pairs = [(i, 16 - i) for i in range(17)]
    pairs += [(17 + k, 26 - k) for k in range(5)]
    pairs += [(i, i) for i in NOSE_BRIDGE]
    pairs += [(31, 35), (32, 34), (33, 33)]
    pairs += [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]
    pairs += [(48, 54), (49, 53), (50, 52), (51, 51), (55, 59), (56, 58), (57, 57)]
    pairs += [(60, 64), (61, 63), (62, 62), (65, 67), (66, 66)]
    table = np.full(N_LANDMARKS, -1, dtype=int)
    for a, b in pairs:
        table[a] = b
        table[b] = a
    assert (table >= 0).all()
    return table


MIRROR = _mirror_table()

# Left/right pairs that lie on a horizontal line in an upright face:
# brow corners, eye corners, nose corners, mouth corners.
SYMMETRIC_PAIRS = ((17, 26), (21, 22), (36, 45), (39, 42), (31, 35), (48, 54))


@dataclass(frozen=True)
class LandmarkSet:
    """
    68 landmarks with per-landmark occlusion information.

    Attributes:
        points: (68, 2) continuous coordinates; NaN where undetected
        occ_score: Signed occlusion scores (positive = visible)
        occ_flag: True where the landmark is occluded
        detected: False where no landmark could be located
        lm_score: Optional per-landmark location scores (<= 0)
        frame: Coordinate frame the points live in
    """
    points: np.ndarray
    occ_score: np.ndarray
    occ_flag: np.ndarray
    detected: np.ndarray
    lm_score: Optional[np.ndarray] = None
    frame: CoordFrame = field(default_factory=original_frame)

    def __post_init__(self):
        if np.shape(self.points) != (N_LANDMARKS, 2):
            raise ValueError(f"LandmarkSet needs ({N_LANDMARKS}, 2) points, got {np.shape(self.points)}")
        for name in ("occ_score", "occ_flag", "detected"):
            if np.shape(getattr(self, name)) != (N_LANDMARKS,):
                raise ValueError(f"LandmarkSet.{name} must have length {N_LANDMARKS}")

    @classmethod
    def from_points(
        cls,
        points,
        occ_flag=None,
        frame: Optional[CoordFrame] = None,
    ) -> "LandmarkSet":
        """Ground-truth style set: every point detected, occ_score = -1/+1 from the flags."""
        pts = np.array(points, dtype=float).reshape(N_LANDMARKS, 2)
        flags = np.zeros(N_LANDMARKS, dtype=bool) if occ_flag is None else np.array(occ_flag, dtype=bool)
        return cls(
            points=pts,
            occ_score=np.where(flags, -1.0, 1.0),
            occ_flag=flags,
            detected=np.all(np.isfinite(pts), axis=1),
            frame=frame or original_frame(),
        )

    def with_points(self, points, frame: Optional[CoordFrame] = None) -> "LandmarkSet":
        return replace(self, points=np.array(points, dtype=float), frame=frame or self.frame)

    def with_flags(self, occ_flag) -> "LandmarkSet":
        flags = np.array(occ_flag, dtype=bool)
        return replace(self, occ_flag=flags, occ_score=np.where(flags, -1.0, np.abs(self.occ_score)))

    def reindexed(self, order) -> "LandmarkSet":
        """Reorder every per-landmark array by ``order``."""
        order = np.asarray(order)
        return replace(
            self,
            points=self.points[order].copy(),
            occ_score=self.occ_score[order].copy(),
            occ_flag=self.occ_flag[order].copy(),
            detected=self.detected[order].copy(),
            lm_score=None if self.lm_score is None else self.lm_score[order].copy(),
        )

    def centroid(self) -> np.ndarray:
        return self.points[self.detected].mean(axis=0)


def canonical_face(center=(0.0, 0.0), scale: float = 1.0) -> np.ndarray:
    """
    Synthetic upright, left-right symmetric 68-point face.

    In unit coordinates the jaw spans x in [-1, 1] and the chin sits at
    y = 0.9 (image y axis points down). Symmetric by construction under
    :data:`MIRROR`.
    """
    pts = np.zeros((N_LANDMARKS, 2))
    t = np.pi * np.arange(17) / 16.0
    pts[0:17, 0] = -np.cos(t)
    pts[0:17, 1] = -0.1 + np.sin(t)

    k = np.arange(5)
    pts[17:22, 0] = -0.8 + 0.15 * k
    pts[17:22, 1] = -0.55 - 0.08 * np.sin(np.pi * k / 4.0)

    pts[27:31] = [[0.0, -0.4], [0.0, -0.27], [0.0, -0.14], [0.0, -0.01]]
    pts[31:34] = [[-0.18, 0.12], [-0.09, 0.15], [0.0, 0.17]]
    pts[36:42] = [[-0.62, -0.3], [-0.52, -0.36], [-0.38, -0.36],
                  [-0.28, -0.3], [-0.38, -0.24], [-0.52, -0.24]]
    pts[48:52] = [[-0.4, 0.5], [-0.25, 0.42], [-0.1, 0.39], [0.0, 0.41]]
    pts[57:60] = [[0.0, 0.65], [-0.1, 0.64], [-0.25, 0.6]]
    pts[60:63] = [[-0.3, 0.5], [-0.1, 0.46], [0.0, 0.46]]
    pts[66:68] = [[0.0, 0.56], [-0.1, 0.55]]

    # Right half from the left half.
    left = [i for i in range(N_LANDMARKS) if pts[i, 0] < 0]
    for i in left:
        j = MIRROR[i]
        if j != i:
            pts[j] = [-pts[i, 0], pts[i, 1]]
    return pts * scale + np.asarray(center, dtype=float)
