"""Binary PLY export of Gaussian maps.

Vertex properties follow the layout common splat viewers read (position,
DC color coefficient, logit opacity, log scale, wxyz rotation), plus 8-bit
``red/green/blue`` for plain point viewers and the raw ``semantic`` code.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .gaussians import GaussianMap

SH_C0 = 0.28209479177387814

_FIELDS = [
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("f_dc_0", "<f4"), ("f_dc_1", "<f4"), ("f_dc_2", "<f4"),
    ("opacity", "<f4"),
    ("scale_0", "<f4"), ("scale_1", "<f4"), ("scale_2", "<f4"),
    ("rot_0", "<f4"), ("rot_1", "<f4"), ("rot_2", "<f4"), ("rot_3", "<f4"),
    ("semantic", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
]
_PLY_TYPES = {"<f4": "float", "u1": "uchar"}


class PlyError(ValueError):
    pass


def map_to_ply_bytes(gmap: GaussianMap) -> bytes:
    n = len(gmap)
    rec = np.zeros(n, dtype=_FIELDS)
    mu = np.asarray(gmap.mu, dtype=np.float64)
    col = np.asarray(gmap.color, dtype=np.float64)
    op = np.clip(np.asarray(gmap.opacity, dtype=np.float64), 1e-6, 1 - 1e-6)
    for k, ax in enumerate("xyz"):
        rec[ax] = mu[:, k]
    for k in range(3):
        rec[f"f_dc_{k}"] = (col[:, k] - 0.5) / SH_C0
        rec[f"scale_{k}"] = np.log(np.asarray(gmap.scale, dtype=np.float64)[:, k])
    for k in range(4):
        rec[f"rot_{k}"] = np.asarray(gmap.rotation)[:, k]
    rec["opacity"] = np.log(op) - np.log1p(-op)
    rec["semantic"] = gmap.semantic
    rgb = np.clip(np.rint(col * 255), 0, 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {_PLY_TYPES[t]} {name}" for name, t in _FIELDS]
    header.append("end_header")
    return ("\n".join(header) + "\n").encode("ascii") + rec.tobytes()


def write_ply(gmap: GaussianMap, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(map_to_ply_bytes(gmap))
    tmp.replace(path)


def read_ply(path) -> np.ndarray:
    """Structured vertex array of a file written by :func:`write_ply`."""
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n") or end < 0:
        raise PlyError(f"{path}: not a PLY file")
    lines = buf[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise PlyError(f"{path}: only binary little-endian PLY is supported")
    n = next(int(ln.split()[2]) for ln in lines if ln.startswith("element vertex"))
    props = [ln.split()[1:] for ln in lines if ln.startswith("property")]
    inv = {v: k for k, v in _PLY_TYPES.items()}
    dtype = [(name, inv[t]) for t, name in props]
    body = buf[end + len(b"end_header\n"):]
    if len(body) != n * np.dtype(dtype).itemsize:
        raise PlyError(f"{path}: vertex data has {len(body)} bytes, expected {n * np.dtype(dtype).itemsize}")
    return np.frombuffer(body, dtype=dtype)
