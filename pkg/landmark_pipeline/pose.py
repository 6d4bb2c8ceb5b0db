"""
Head pose from rigid facial landmarks with POSIT.

The camera frame is x right, y down, z forward (image coordinates). The
model frame coincides with it for a face looking straight into the camera,
with the nose tip at the origin. Reported angles live in a head frame with
x right, y up, z toward the camera: positive yaw turns the face to its
left, and R = Ry(yaw) Rx(pitch) Rz(roll).
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from landmark_pipeline.geometry import Point2
from landmark_pipeline.landmarks import RIGID_INDICES, LandmarkSet

logger = logging.getLogger(__name__)

MODEL_NAMES = (
    "left_eye_outer",
    "left_eye_inner",
    "right_eye_inner",
    "right_eye_outer",
    "nose_tip",
    "left_nose_corner",
    "right_nose_corner",
    "chin",
)
DEFAULT_MODEL_PATH = Path(__file__).parent / "data" / "face_model.csv"

MIN_POINTS = 4
POSIT_TOLERANCE = 1e-6
POSIT_MAX_ITER = 100

# Camera frame <-> head frame (flip y and z).
_FLIP = np.diag([1.0, -1.0, -1.0])


class PoseError(ValueError):
    """Raised when a pose cannot be estimated."""


@dataclass(frozen=True)
class FaceModel3D:
    """Eight named rigid points of a generic head, in millimeters."""
    points: np.ndarray
    names: tuple = MODEL_NAMES

    def __post_init__(self):
        if tuple(self.names) != MODEL_NAMES:
            raise PoseError(f"Face model points must be named {MODEL_NAMES}, got {tuple(self.names)}")
        if np.shape(self.points) != (len(MODEL_NAMES), 3):
            raise PoseError(f"Face model needs {len(MODEL_NAMES)}x3 points, got {np.shape(self.points)}")
        centered = self.points - self.points.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[-1] < 1e-3 * sv[0]:
            raise PoseError("Face model points are (nearly) coplanar")


class CameraIntrinsics(BaseModel):
    model_config = ConfigDict(frozen=True)

    focal: float = Field(..., gt=0, description="Focal length in pixels")
    cx: float = Field(..., description="Principal point x in pixels")
    cy: float = Field(..., description="Principal point y in pixels")

    @classmethod
    def for_image(cls, width: int, height: int, focal: Optional[float] = None) -> "CameraIntrinsics":
        """Default camera: focal = image width, principal point at the image center."""
        return cls(focal=float(focal or width), cx=width / 2.0, cy=height / 2.0)


class PoseAngles(BaseModel):
    model_config = ConfigDict(frozen=True)

    yaw: float = Field(..., ge=-180, le=180, description="Degrees, positive = face turning to its left")
    pitch: float = Field(..., ge=-90, le=90, description="Degrees")
    roll: float = Field(..., ge=-180, le=180, description="Degrees")


@dataclass(frozen=True)
class PositResult:
    rotation: np.ndarray
    translation: np.ndarray
    iterations: int


def load_face_model(path: Union[str, Path, None] = None) -> FaceModel3D:
    """
    Load a face model CSV with header ``name,x_mm,y_mm,z_mm``.

    Args:
        path: CSV file; the shipped model when omitted

    Raises:
        PoseError: If the columns, names or geometry are invalid
    """
    path = Path(path) if path else DEFAULT_MODEL_PATH
    frame = pd.read_csv(path)
    expected = ["name", "x_mm", "y_mm", "z_mm"]
    if list(frame.columns) != expected:
        raise PoseError(f"{path}: expected columns {expected}, got {list(frame.columns)}")
    logger.debug(f"Loaded face model from {path}")
    return FaceModel3D(
        points=frame[["x_mm", "y_mm", "z_mm"]].to_numpy(dtype=float),
        names=tuple(frame["name"].astype(str)),
    )


def select_rigid(lms: LandmarkSet, exclude_occluded: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pick the eight pose landmarks in model order.

    Returns:
        (points (8, 2), validity mask (8,))

    Raises:
        PoseError: If fewer than four of them are usable
    """
    idx = list(RIGID_INDICES)
    points = lms.points[idx].astype(float)
    mask = lms.detected[idx] & np.all(np.isfinite(points), axis=1)
    if exclude_occluded:
        mask &= ~lms.occ_flag[idx]
    if mask.sum() < MIN_POINTS:
        raise PoseError(f"Only {int(mask.sum())} rigid landmarks available, need {MIN_POINTS}")
    return points, mask


def project(model: FaceModel3D, rotation: np.ndarray, translation: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """Perspective projection of the model points into the image."""
    cam_pts = model.points @ np.asarray(rotation).T + np.asarray(translation)
    if np.any(cam_pts[:, 2] <= 0):
        raise PoseError("Model points lie behind the camera")
    return np.column_stack([
        cam.focal * cam_pts[:, 0] / cam_pts[:, 2] + cam.cx,
        cam.focal * cam_pts[:, 1] / cam_pts[:, 2] + cam.cy,
    ])


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def posit(
    model: FaceModel3D,
    image_pts: np.ndarray,
    cam: CameraIntrinsics,
    mask: Optional[np.ndarray] = None,
    tolerance: float = POSIT_TOLERANCE,
    max_iter: int = POSIT_MAX_ITER,
) -> PositResult:
    """
    Estimate rotation and translation with the POSIT iteration.

    Each pass solves the scaled-orthographic pose through the pseudo-inverse
    of the object matrix, then updates the perspective corrections
    ``eps_i = (k . M_i) / t_z`` until they change by less than ``tolerance``.

    Args:
        model: 3D face model
        image_pts: (8, 2) image points in model order
        cam: Camera intrinsics
        mask: Optional validity mask; the first valid point is the reference

    Returns:
        PositResult with a proper rotation (det +1) and the translation of
        the model origin

    Raises:
        PoseError: Too few points, degenerate geometry, object behind the
            camera, or no convergence
    """
    mask = np.ones(len(model.points), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    obj = model.points[mask]
    img = np.asarray(image_pts, dtype=float)[mask] - np.array([cam.cx, cam.cy])
    if len(obj) < MIN_POINTS:
        raise PoseError(f"POSIT needs at least {MIN_POINTS} points, got {len(obj)}")

    ref = obj[0]
    a = obj[1:] - ref
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[-1] < 1e-6 * sv[0]:
        raise PoseError("Selected model points are coplanar")
    b = np.linalg.pinv(a)

    eps = np.zeros(len(a))
    for iteration in range(1, max_iter + 1):
        xp = img[1:, 0] * (1.0 + eps) - img[0, 0]
        yp = img[1:, 1] * (1.0 + eps) - img[0, 1]
        i_vec, j_vec = b @ xp, b @ yp
        ni, nj = np.linalg.norm(i_vec), np.linalg.norm(j_vec)
        if ni == 0 or nj == 0:
            raise PoseError("Degenerate image points")
        scale = (ni + nj) / 2.0
        i_unit, j_unit = i_vec / ni, j_vec / nj
        k_unit = np.cross(i_unit, j_unit)
        k_unit /= np.linalg.norm(k_unit)
        tz = cam.focal / scale
        if tz <= 0:
            raise PoseError("Object lies behind the camera")

        new_eps = a @ k_unit / tz
        delta = np.max(np.abs(new_eps - eps))
        eps = new_eps
        if delta < tolerance:
            break
    else:
        raise PoseError(f"POSIT did not converge in {max_iter} iterations")

    rotation = _orthonormalize(np.vstack([i_unit, j_unit, np.cross(i_unit, j_unit)]))
    t_ref = np.array([img[0, 0] * tz / cam.focal, img[0, 1] * tz / cam.focal, tz])
    translation = t_ref - rotation @ ref
    logger.debug(f"POSIT converged in {iteration} iterations (t_z={tz:.1f})")
    return PositResult(rotation, translation, iteration)


def euler_to_rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """R = Ry(yaw) Rx(pitch) Rz(roll), angles in degrees."""
    a, b, g = np.radians([yaw, pitch, roll])
    ry = np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])
    rx = np.array([[1, 0, 0], [0, math.cos(b), -math.sin(b)], [0, math.sin(b), math.cos(b)]])
    rz = np.array([[math.cos(g), -math.sin(g), 0], [math.sin(g), math.cos(g), 0], [0, 0, 1]])
    return ry @ rx @ rz


def rotation_to_euler(r: np.ndarray, tolerance: float = 1e-6) -> PoseAngles:
    """
    Intrinsic yaw-pitch-roll (Y-X-Z) angles of a rotation matrix.

    At gimbal lock (|pitch| = 90) roll is set to 0.

    Raises:
        PoseError: If ``r`` is not a proper rotation within ``tolerance``
    """
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or np.abs(r.T @ r - np.eye(3)).max() > tolerance or np.linalg.det(r) < 0:
        raise PoseError("Matrix is not a proper rotation")

    sin_pitch = float(np.clip(-r[1, 2], -1.0, 1.0))
    pitch = math.asin(sin_pitch)
    if abs(abs(sin_pitch) - 1.0) < 1e-12:
        yaw = math.atan2(-r[2, 0], r[0, 0])
        roll = 0.0
    else:
        yaw = math.atan2(r[0, 2], r[2, 2])
        roll = math.atan2(r[1, 0], r[1, 1])
    return PoseAngles(yaw=math.degrees(yaw), pitch=math.degrees(pitch), roll=math.degrees(roll))


def camera_to_head(rotation: np.ndarray) -> np.ndarray:
    """Express a camera-frame rotation in the head frame (and back; the map is an involution)."""
    return _FLIP @ np.asarray(rotation) @ _FLIP


def estimate_pose(
    lms: LandmarkSet,
    cam: CameraIntrinsics,
    model: Optional[FaceModel3D] = None,
    exclude_occluded: bool = False,
) -> PoseAngles:
    """
    Head pose of a landmark set.

    Occluded landmarks are used unless ``exclude_occluded`` is set.

    Raises:
        PoseError: If the pose is unavailable
    """
    model = model or load_face_model()
    points, mask = select_rigid(lms, exclude_occluded)
    result = posit(model, points, cam, mask)
    return rotation_to_euler(camera_to_head(result.rotation))
