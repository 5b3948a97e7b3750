"""Gaussian primitives: parameter storage, covariance construction,
initialisation from point clouds, pooled features and the binary map format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud

MAP_MAGIC = b"G3DM"
MAP_VERSION = 1
RECORD_FLOATS = 15
FEATURE_DIM = 7


class MapFormatError(ValueError):
    pass


class InitializationError(ValueError):
    pass


class PoolingError(ValueError):
    pass


@dataclass(frozen=True)
class Gaussian:
    """A single primitive.  Read-only view; maps store struct-of-arrays."""

    mu: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    semantic: float

    def __post_init__(self) -> None:
        for name in ("mu", "scale", "rotation", "color"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        vals = np.concatenate([self.mu, self.scale, self.rotation, [self.opacity], self.color, [self.semantic]])
        if not np.all(np.isfinite(vals)):
            raise ValueError("Gaussian has non-finite fields")
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation quaternion is not unit length")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity outside [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("color outside [0, 1]")

    def feature(self) -> np.ndarray:
        return np.concatenate([self.mu, self.color, [self.semantic]])


@dataclass
class GaussianMap:
    """Ordered collection of Gaussians.

    ``frame`` is ``"world"`` or ``"ego:<node id>"``; ``step`` records the
    navigation step at which the map was built.
    """

    mu: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    semantic: np.ndarray
    frame: str = "world"
    step: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.mu)
        shapes = {"mu": (n, 3), "scale": (n, 3), "rotation": (n, 4), "opacity": (n,),
                  "color": (n, 3), "semantic": (n,)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name))
            if arr.dtype.kind != "f":
                arr = arr.astype(np.float32)
            arr = arr.reshape(shape)
            setattr(self, name, arr)

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.mu[i], self.scale[i], self.rotation[i], float(self.opacity[i]),
                        self.color[i], float(self.semantic[i]))

    @classmethod
    def empty(cls, dtype=np.float32, **kw) -> "GaussianMap":
        z = lambda *s: np.zeros((0, *s), dtype=dtype)  # noqa: E731
        return cls(z(3), z(3), z(4), z(), z(3), z(), **kw)

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian], dtype=np.float32, **kw) -> "GaussianMap":
        if not gaussians:
            return cls.empty(dtype, **kw)
        return cls(
            np.array([g.mu for g in gaussians], dtype=dtype),
            np.array([g.scale for g in gaussians], dtype=dtype),
            np.array([g.rotation for g in gaussians], dtype=dtype),
            np.array([g.opacity for g in gaussians], dtype=dtype),
            np.array([g.color for g in gaussians], dtype=dtype),
            np.array([g.semantic for g in gaussians], dtype=dtype),
            **kw,
        )

    def astype(self, dtype) -> "GaussianMap":
        return GaussianMap(*(getattr(self, k).astype(dtype) for k in _FIELDS),
                           frame=self.frame, step=self.step, meta=dict(self.meta))

    def copy(self) -> "GaussianMap":
        return GaussianMap(*(getattr(self, k).copy() for k in _FIELDS),
                           frame=self.frame, step=self.step, meta=dict(self.meta))

    def subset(self, idx) -> "GaussianMap":
        idx = np.asarray(idx)
        return GaussianMap(*(getattr(self, k)[idx] for k in _FIELDS),
                           frame=self.frame, step=self.step, meta=dict(self.meta))

    def concat(self, other: "GaussianMap") -> "GaussianMap":
        return GaussianMap(*(np.concatenate([getattr(self, k), getattr(other, k)]) for k in _FIELDS),
                           frame=self.frame, step=self.step, meta=dict(self.meta))

    def features(self) -> np.ndarray:
        """(N, 7) array of concat(mu, color, semantic)."""
        return np.concatenate([self.mu, self.color, self.semantic[:, None]], axis=1).astype(np.float64)

    def validate(self) -> None:
        """Raise ``ValueError`` if any element violates the Gaussian invariants."""
        arrays = [getattr(self, k) for k in _FIELDS]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("map has non-finite parameters")
        if np.any(self.scale <= 0):
            raise ValueError("map has non-positive scales")
        if len(self) and np.max(np.abs(np.linalg.norm(self.rotation.astype(np.float64), axis=1) - 1)) > 1e-6:
            raise ValueError("map has non-unit quaternions")
        if np.any((self.opacity < 0) | (self.opacity > 1)):
            raise ValueError("map has opacity outside [0, 1]")
        if np.any((self.color < 0) | (self.color > 1)):
            raise ValueError("map has color outside [0, 1]")


_FIELDS = ("mu", "scale", "rotation", "opacity", "color", "semantic")


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(…, 4) wxyz quaternions -> (…, 3, 3) rotation matrices.  Normalises input."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def quat_rotmat_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions, shape (…, 4, 3, 3), of the polynomial map above."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    o = np.zeros_like(w)
    dw = [[o, -z, y], [z, o, -x], [-y, x, o]]
    dx = [[o, y, z], [y, -2 * x, -w], [z, w, -2 * x]]
    dy = [[-2 * y, x, w], [x, o, z], [-w, z, -2 * y]]
    dz = [[-2 * z, -w, x], [w, -2 * z, y], [x, y, o]]
    mats = [np.stack([np.stack(row, -1) for row in d], -2) for d in (dw, dx, dy, dz)]
    return 2.0 * np.stack(mats, -3)


def covariance_from(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Sigma = R diag(scale^2) R^T; broadcasts over leading axes."""
    R = quat_to_rotmat(rotation)
    M = R * np.asarray(scale, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass(frozen=True)
class InitConfig:
    initial_opacity: float = 0.5
    sem_init_range: float = 0.1
    scale_factor: float = 0.5
    scale_neighbors: int = 3
    scale_min: float = 0.005
    scale_max: float = 0.5
    fallback_scale: float = 0.05
    voxel_size: float | None = None  # None: no downsampling
    seed: int = 0


def nearest_neighbor_scale(points: np.ndarray, cfg: InitConfig) -> np.ndarray:
    """Isotropic initial scale per point from the mean distance to its k nearest neighbours."""
    n = len(points)
    if n < cfg.scale_neighbors + 1:
        return np.full(n, cfg.fallback_scale)
    dist, _ = cKDTree(points).query(points, k=cfg.scale_neighbors + 1)
    s = cfg.scale_factor * dist[:, 1:].mean(axis=1)
    return np.clip(s, cfg.scale_min, cfg.scale_max)


def init_from_pointcloud(pc: PointCloud, cfg: InitConfig = InitConfig(), dtype=np.float32) -> GaussianMap:
    """One Gaussian per (optionally voxel-downsampled) point.

    Point labels, when present, are kept in ``map.meta["labels"]``.
    """
    if cfg.voxel_size:
        pc = pc.voxel_downsample(cfg.voxel_size)
    n = len(pc)
    if n == 0:
        raise InitializationError("cannot initialise a Gaussian map from an empty point cloud")
    rng = np.random.default_rng(cfg.seed)
    s = nearest_neighbor_scale(pc.points, cfg)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    meta = {}
    if pc.labels is not None:
        meta["labels"] = pc.labels.copy()
    return GaussianMap(
        mu=pc.points.astype(dtype),
        scale=np.repeat(s[:, None], 3, axis=1).astype(dtype),
        rotation=rot.astype(dtype),
        opacity=np.full(n, cfg.initial_opacity, dtype=dtype),
        color=np.clip(pc.colors, 0.0, 1.0).astype(dtype),
        semantic=rng.uniform(-cfg.sem_init_range, cfg.sem_init_range, n).astype(dtype),
        meta=meta,
    )


def pooled_feature(gmap: GaussianMap, selection=None) -> np.ndarray:
    """Mean 7-d feature (mu, color, semantic) over ``selection`` (all if None)."""
    feats = gmap.features()
    if selection is not None:
        sel = np.asarray(selection)
        if sel.dtype == bool:
            sel = np.flatnonzero(sel)
        sel = sel.astype(np.int64).reshape(-1)
        if sel.size and (sel.min() < 0 or sel.max() >= len(gmap)):
            raise PoolingError("selection index out of range")
        feats = feats[sel]
    if len(feats) == 0:
        raise PoolingError("cannot pool an empty selection")
    return feats.mean(axis=0)


def _records(gmap: GaussianMap) -> np.ndarray:
    return np.concatenate(
        [gmap.mu, gmap.scale, gmap.rotation, gmap.opacity[:, None], gmap.color, gmap.semantic[:, None]],
        axis=1).astype("<f4")


def map_to_bytes(gmap: GaussianMap) -> bytes:
    head = MAP_MAGIC + struct.pack("<II", MAP_VERSION, len(gmap))
    return head + _records(gmap).tobytes()


def map_from_bytes(buf: bytes) -> GaussianMap:
    if len(buf) < 12:
        raise MapFormatError(f"truncated header at byte offset {len(buf)} (need 12 bytes)")
    if buf[:4] != MAP_MAGIC:
        raise MapFormatError(f"bad magic {buf[:4]!r} at byte offset 0")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != MAP_VERSION:
        raise MapFormatError(f"unsupported version {version} at byte offset 4")
    need = 12 + count * RECORD_FLOATS * 4
    if len(buf) < need:
        whole = (len(buf) - 12) // (RECORD_FLOATS * 4)
        raise MapFormatError(
            f"truncated record {whole} at byte offset {12 + whole * RECORD_FLOATS * 4} "
            f"(file has {len(buf)} bytes, header promises {need})")
    if len(buf) > need:
        raise MapFormatError(f"trailing data at byte offset {need}")
    rec = np.frombuffer(buf, dtype="<f4", count=count * RECORD_FLOATS, offset=12).reshape(count, RECORD_FLOATS)
    rec = rec.astype(np.float32)
    return GaussianMap(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10], rec[:, 11:14], rec[:, 14])


def save_map(gmap: GaussianMap, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(map_to_bytes(gmap))
    tmp.replace(path)


def load_map(path) -> GaussianMap:
    return map_from_bytes(Path(path).read_bytes())
