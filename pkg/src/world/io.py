"""
On-disk formats: PPM camera images, raw depth maps, occupancy and logit grids
"""

import logging
import os

import numpy as np
from PIL import Image

from ..core.errors import DatasetError

logger = logging.getLogger(__name__)

OCC_MAGIC = b"FOOCC1\n"
LOGITS_MAGIC = b"FOLGT1\n"
_U32 = np.dtype("<u4")


def _read_bytes(path):
    try:
        with open(path, "rb") as handle:
            return handle.read()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc


def _write_bytes(path, payload):
    try:
        os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
        with open(path, "wb") as handle:
            handle.write(payload)
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc


def write_ppm(path, image):
    """Save a [3, H, W] image with values in [0, 1] as binary P6."""
    pixels = np.clip(np.round(np.moveaxis(np.asarray(image), 0, -1) * 255.0), 0, 255).astype(np.uint8)
    try:
        os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
        Image.fromarray(pixels).save(path, format="PPM")
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc


def read_ppm(path):
    """Load a P6 image as [3, H, W] floats in [0, 1]."""
    try:
        with Image.open(path) as handle:
            pixels = np.asarray(handle.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return np.moveaxis(pixels, -1, 0) / 255.0


def write_depth(path, depth):
    _write_bytes(path, np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path, shape):
    payload = _read_bytes(path)
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes of depth, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)


def encode_occupancy(grid):
    grid = np.asarray(grid)
    if grid.ndim != 3 or grid.size and (grid.min() < 0 or grid.max() > 255):
        raise DatasetError(f"occupancy grid must be [Z, Y, X] with ids in [0, 255], got {grid.shape}")
    return OCC_MAGIC + np.array(grid.shape, dtype=_U32).tobytes() + grid.astype(np.uint8).tobytes()


def decode_occupancy(payload, source="<bytes>"):
    header = len(OCC_MAGIC) + 12
    if not payload.startswith(OCC_MAGIC) or len(payload) < header:
        raise DatasetError(f"{source}: not an occupancy grid")
    shape = tuple(int(n) for n in np.frombuffer(payload[len(OCC_MAGIC):header], dtype=_U32))
    body = payload[header:]
    if len(body) != int(np.prod(shape)):
        raise DatasetError(f"{source}: grid {shape} needs {int(np.prod(shape))} bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(shape).copy()


def write_occupancy(path, grid):
    _write_bytes(path, encode_occupancy(grid))


def read_occupancy(path):
    return decode_occupancy(_read_bytes(path), source=str(path))


def write_logits(path, logits):
    """[C, Z, Y, X] float32 logits behind the FOLGT1 header."""
    logits = np.asarray(logits)
    if logits.ndim != 4:
        raise DatasetError(f"logits must be [C, Z, Y, X], got {logits.shape}")
    _write_bytes(path, LOGITS_MAGIC + np.array(logits.shape, dtype=_U32).tobytes()
                 + np.ascontiguousarray(logits, dtype="<f4").tobytes())


def read_logits(path):
    payload = _read_bytes(path)
    header = len(LOGITS_MAGIC) + 16
    if not payload.startswith(LOGITS_MAGIC) or len(payload) < header:
        raise DatasetError(f"{path}: not a logits file")
    shape = tuple(int(n) for n in np.frombuffer(payload[len(LOGITS_MAGIC):header], dtype=_U32))
    body = payload[header:]
    if len(body) != 4 * int(np.prod(shape)):
        raise DatasetError(f"{path}: logits {shape} truncated")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float64)
