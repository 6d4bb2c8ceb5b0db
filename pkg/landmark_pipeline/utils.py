"""
File formats of the landmark pipeline.

Includes the binary heatmap container, 300-W ``.pts`` annotations, JSON
Lines records and PNG images.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Iterable, List, Optional, Type, TypeVar, Union

import cv2
import numpy as np
from pydantic import BaseModel, ValidationError

from landmark_pipeline.landmarks import N_LANDMARKS

logger = logging.getLogger(__name__)

HEATMAP_MAGIC = b"OHM1"
HEATMAP_HEADER = struct.Struct("<4sIII")
PTS_VERSION = "version: 1"

PathLike = Union[str, Path]
ModelT = TypeVar("ModelT", bound=BaseModel)


class FormatError(ValueError):
    """Raised for malformed files; the message starts with ``path`` or ``path:line``."""


def write_heatmaps(path: PathLike, stack: np.ndarray) -> None:
    """Write an (n, h, w) stack as little-endian float32 behind a 16-byte header."""
    stack = np.asarray(stack)
    if stack.ndim != 3:
        raise FormatError(f"{path}: expected an (n, h, w) stack, got shape {stack.shape}")
    n, h, w = stack.shape
    payload = np.ascontiguousarray(stack, dtype="<f4").tobytes()
    Path(path).write_bytes(HEATMAP_HEADER.pack(HEATMAP_MAGIC, n, h, w) + payload)
    logger.debug(f"Wrote {n}x{h}x{w} heatmaps to {path}")


def read_heatmaps(
    path: PathLike,
    expected_maps: Optional[int] = None,
    expected_size: Optional[int] = None,
) -> np.ndarray:
    """
    Read a heatmap file.

    Args:
        path: File to read
        expected_maps: Required number of maps, unchecked when None
        expected_size: Required map height and width, unchecked when None

    Returns:
        (n, h, w) float32 array

    Raises:
        FormatError: Bad magic, truncated or oversized payload, or a map
            count or map size other than expected
    """
    data = Path(path).read_bytes()
    if len(data) < HEATMAP_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, n, h, w = HEATMAP_HEADER.unpack_from(data)
    if magic != HEATMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {HEATMAP_MAGIC!r}")
    expected_len = HEATMAP_HEADER.size + 4 * n * h * w
    if len(data) != expected_len:
        raise FormatError(f"{path}: payload is {len(data)} bytes, header implies {expected_len}")
    if expected_maps is not None and n != expected_maps:
        raise FormatError(f"{path}: {n} maps, expected {expected_maps}")
    if expected_size is not None and (h, w) != (expected_size, expected_size):
        raise FormatError(f"{path}: maps are {h}x{w}, expected {expected_size}x{expected_size}")
    return np.frombuffer(data, dtype="<f4", offset=HEATMAP_HEADER.size).reshape(n, h, w).copy()


def read_pts(path: PathLike) -> np.ndarray:
    """
    Parse a 300-W ``.pts`` file.

    Returns:
        (68, 2) array in file order

    Raises:
        FormatError: With ``path:line`` for malformed headers, braces or
            coordinates, or a point count other than 68
    """
    lines = Path(path).read_text().splitlines()
    # (line number, stripped text) of every non-blank line
    rows = [(i + 1, line.strip()) for i, line in enumerate(lines) if line.strip()]

    def expect(pos: int, text: str):
        if pos >= len(rows):
            raise FormatError(f"{path}: unexpected end of file, expected '{text}'")
        if rows[pos][1] != text:
            raise FormatError(f"{path}:{rows[pos][0]}: expected '{text}', got '{rows[pos][1]}'")

    if not rows or not rows[0][1].startswith("version:"):
        raise FormatError(f"{path}:1: missing 'version:' header")
    if len(rows) < 2 or not rows[1][1].startswith("n_points:"):
        raise FormatError(f"{path}:{rows[1][0] if len(rows) > 1 else 2}: missing 'n_points:' header")
    try:
        n_points = int(rows[1][1].split(":", 1)[1])
    except ValueError:
        raise FormatError(f"{path}:{rows[1][0]}: malformed point count '{rows[1][1]}'")
    if n_points != N_LANDMARKS:
        raise FormatError(f"{path}:{rows[1][0]}: unsupported landmark scheme with {n_points} points (need {N_LANDMARKS})")

    expect(2, "{")
    points = np.zeros((n_points, 2))
    for k in range(n_points):
        pos = 3 + k
        if pos >= len(rows) or rows[pos][1] == "}":
            raise FormatError(f"{path}: only {k} of {n_points} points before '}}'")
        lineno, text = rows[pos]
        fields = text.split()
        try:
            if len(fields) != 2:
                raise ValueError
            points[k] = float(fields[0]), float(fields[1])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected 'x y', got '{text}'")
    expect(3 + n_points, "}")
    if len(rows) > 4 + n_points:
        raise FormatError(f"{path}:{rows[4 + n_points][0]}: trailing content after '}}'")
    return points


def write_pts(path: PathLike, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(points) != N_LANDMARKS:
        raise FormatError(f"{path}: need {N_LANDMARKS} points, got {len(points)}")
    body = "\n".join(f"{x:.6f} {y:.6f}" for x, y in points)
    Path(path).write_text(f"{PTS_VERSION}\nn_points: {N_LANDMARKS}\n{{\n{body}\n}}\n")


def read_jsonl(path: PathLike, model: Type[ModelT]) -> List[ModelT]:
    """
    Read one pydantic record per non-blank line.

    Raises:
        FormatError: ``path:line`` of the first invalid record
    """
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(model.model_validate(json.loads(line)))
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({e.msg})")
            except ValidationError as e:
                first = e.errors()[0]
                where = ".".join(str(p) for p in first["loc"]) or "record"
                raise FormatError(f"{path}:{lineno}: {where}: {first['msg']}")
    logger.debug(f"Read {len(records)} records from {path}")
    return records


def write_jsonl(path: PathLike, records: Iterable[BaseModel]) -> int:
    count = 0
    with open(path, "w") as fh:
        for record in records:
            fh.write(record.model_dump_json(exclude_none=True) + "\n")
            count += 1
    logger.debug(f"Wrote {count} records to {path}")
    return count


def read_image(path: PathLike, keep_alpha: bool = False) -> np.ndarray:
    """
    Read an image as uint8 grayscale, RGB or (with ``keep_alpha``) RGBA.

    Raises:
        FormatError: If the file cannot be decoded
    """
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: cannot decode image")
    if img.dtype != np.uint8:
        img = cv2.convertScaleAbs(img, alpha=255.0 / max(1, int(np.iinfo(img.dtype).max)))
    if img.ndim == 2:
        return img
    if img.shape[2] == 4:
        return cv2.cvtColor(img, cv2.COLOR_BGRA2RGBA) if keep_alpha else cv2.cvtColor(img, cv2.COLOR_BGRA2RGB)
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_image(path: PathLike, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 3:
        img = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
    elif img.ndim == 3 and img.shape[2] == 4:
        img = cv2.cvtColor(img, cv2.COLOR_RGBA2BGRA)
    if not cv2.imwrite(str(path), img):
        raise FormatError(f"{path}: cannot encode image")
