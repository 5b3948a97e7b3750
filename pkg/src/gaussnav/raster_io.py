"""Raster file formats: 8-bit RGB PNG, ``.depth`` and ``.sem`` float rasters.

``.depth``: b"DPTH", u32 LE width, u32 LE height, width*height f32 LE, row-major.
``.sem``:   same layout with magic b"SEMR".
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_MAGIC = b"DPTH"
SEM_MAGIC = b"SEMR"


class RasterFormatError(ValueError):
    pass


def _write_float_raster(path, arr: np.ndarray, magic: bytes) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise RasterFormatError(f"expected a 2-D raster, got shape {arr.shape}")
    h, w = arr.shape
    buf = magic + struct.pack("<II", w, h) + np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf)
    tmp.replace(path)


def _read_float_raster(path, magic: bytes) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise RasterFormatError(f"{path}: truncated header at byte offset {len(buf)}")
    if buf[:4] != magic:
        raise RasterFormatError(f"{path}: bad magic {buf[:4]!r} at byte offset 0, expected {magic!r}")
    w, h = struct.unpack_from("<II", buf, 4)
    need = 12 + 4 * w * h
    if len(buf) != need:
        raise RasterFormatError(f"{path}: size {len(buf)} bytes, expected {need} for {w}x{h}")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)


def write_depth(path, depth: np.ndarray) -> None:
    _write_float_raster(path, depth, DEPTH_MAGIC)


def read_depth(path) -> np.ndarray:
    return _read_float_raster(path, DEPTH_MAGIC)


def write_sem(path, sem: np.ndarray) -> None:
    _write_float_raster(path, sem, SEM_MAGIC)


def read_sem(path) -> np.ndarray:
    return _read_float_raster(path, SEM_MAGIC)


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_rgb(path, rgb: np.ndarray) -> None:
    arr = np.asarray(rgb)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_rgb(path) -> np.ndarray:
    """Float RGB in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
