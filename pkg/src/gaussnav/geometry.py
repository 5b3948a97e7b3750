"""Pinhole camera model, rigid poses and pixel <-> 3D conversions.

Camera frame convention: x right, y down, z forward.  Pixel ``(u, v)``
addresses the *center* of column ``u`` / row ``v``; continuous coordinates
are allowed for projected points.  Depth value 0 marks "no return".
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NEAR_PLANE = 0.01


class GeometryError(ValueError):
    """Invalid camera, pose or image input."""


class BehindCamera(GeometryError):
    """Point lies at or behind the near plane."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cu: float
    cv: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"bad sensor size {self.width}x{self.height}")
        if not (0 <= self.cu < self.width and 0 <= self.cv < self.height):
            raise GeometryError(f"principal point ({self.cu}, {self.cv}) outside {self.width}x{self.height}")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        """Square-pixel camera with horizontal field of view ``fov_deg``.

        The principal point sits at the geometric image center
        ``((W-1)/2, (H-1)/2)`` in pixel-center coordinates.
        """
        f = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cu], [0.0, self.fy, self.cv], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cu": self.cu, "cv": self.cv,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cu"]), float(d["cv"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform: ``p_world = R @ p_cam + t``."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {R.shape}")
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise GeometryError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise GeometryError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_along(cls, position, azimuth: float, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Level camera at ``position`` facing azimuth ``azimuth`` (radians) in a z-up world."""
        fwd = np.array([math.cos(azimuth), math.sin(azimuth), 0.0])
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)
        return cls(R, np.asarray(position, dtype=np.float64))

    def world_to_camera(self, p: np.ndarray) -> np.ndarray:
        # row-vector form of R^T (p - t)
        return (np.asarray(p, dtype=np.float64) - self.translation) @ self.rotation

    def camera_to_world(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["rotation"], dtype=np.float64), np.array(d["translation"], dtype=np.float64))


@dataclass
class PointCloud:
    """World-frame points with colors; ``labels`` optionally tags each point
    with the instance id of the pixel it came from (0 = unlabeled)."""

    points: np.ndarray
    colors: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise GeometryError("points and colors differ in length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                raise GeometryError("labels and points differ in length")
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("point cloud contains non-finite positions")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def concat(cls, clouds: list["PointCloud"]) -> "PointCloud":
        if not clouds:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)))
        labels = None
        if all(c.labels is not None for c in clouds):
            labels = np.concatenate([c.labels for c in clouds])
        return cls(np.concatenate([c.points for c in clouds]),
                   np.concatenate([c.colors for c in clouds]), labels)

    def voxel_downsample(self, cell: float) -> "PointCloud":
        """Average points falling in the same cubic cell of side ``cell``.

        Output order follows the lexicographic order of voxel keys, so the
        result does not depend on input order.  Labels take the most frequent
        value in each voxel (ties -> smallest id).
        """
        if cell <= 0 or len(self) == 0:
            return self
        keys = np.floor(self.points / cell).astype(np.int64)
        _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inv = inv.reshape(-1)
        n = len(counts)
        pts = np.stack([np.bincount(inv, self.points[:, k], n) for k in range(3)], axis=1) / counts[:, None]
        cols = np.stack([np.bincount(inv, self.colors[:, k], n) for k in range(3)], axis=1) / counts[:, None]
        labels = None
        if self.labels is not None:
            # most frequent label per voxel: sort by (voxel, label), count runs
            order = np.lexsort((self.labels, inv))
            v_sorted, l_sorted = inv[order], self.labels[order]
            pair, run = np.unique(np.stack([v_sorted, l_sorted], 1), axis=0, return_counts=True)
            pick = np.lexsort((pair[:, 1], -run, pair[:, 0]))
            first = np.ones(len(pick), dtype=bool)
            first[1:] = pair[pick[1:], 0] != pair[pick[:-1], 0]
            labels = np.zeros(n, dtype=np.int64)
            labels[pair[pick[first], 0]] = pair[pick[first], 1]
        return PointCloud(pts, cols, labels)


def backproject_pixel(intr: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray | None:
    """Camera-frame point for pixel ``(u, v)`` at ``depth``; ``None`` for a rejected pixel."""
    if not math.isfinite(depth) or depth <= 0:
        return None
    z = float(depth)
    return np.array([(u - intr.cu) * z / intr.fx, (v - intr.cv) * z / intr.fy, z])


def backproject_points(intr: CameraIntrinsics, pose: Pose, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """World points for continuous pixels ``uv`` (N,2) at positive camera depths ``depth`` (N,)."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    z = np.asarray(depth, dtype=np.float64).reshape(-1)
    if len(z) != len(uv):
        raise GeometryError("uv and depth differ in length")
    if not np.all(np.isfinite(z) & (z > 0)):
        raise GeometryError("depths must be finite and positive")
    cam = np.stack([(uv[:, 0] - intr.cu) * z / intr.fx, (uv[:, 1] - intr.cv) * z / intr.fy, z], axis=1)
    return pose.camera_to_world(cam)


def backproject_frame(intr: CameraIntrinsics, pose: Pose, depth_image: np.ndarray,
                      color_image: np.ndarray, label_image: np.ndarray | None = None) -> PointCloud:
    depth = np.asarray(depth_image, dtype=np.float64)
    color = np.asarray(color_image)
    if depth.shape != (intr.height, intr.width):
        raise GeometryError(f"depth image {depth.shape} does not match camera {intr.height}x{intr.width}")
    if color.shape != (intr.height, intr.width, 3):
        raise GeometryError(f"color image {color.shape} does not match camera {intr.height}x{intr.width}x3")
    if color.dtype == np.uint8:
        color = color.astype(np.float64) / 255.0
    vv, uu = np.nonzero(np.isfinite(depth) & (depth > 0))
    pts = backproject_points(intr, pose, np.stack([uu, vv], axis=1), depth[vv, uu])
    labels = None
    if label_image is not None:
        labels = np.asarray(label_image)[vv, uu]
    return PointCloud(pts, np.asarray(color[vv, uu], dtype=np.float64), labels)


def project_points(intr: CameraIntrinsics, pose: Pose, p: np.ndarray, near: float = NEAR_PLANE):
    """Vectorised projection.  Returns ``(uv (N,2), z (N,), visible (N,) bool)``."""
    pc = pose.world_to_camera(np.asarray(p, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    ok = z > near
    zs = np.where(ok, z, 1.0)
    uv = np.stack([intr.fx * pc[:, 0] / zs + intr.cu, intr.fy * pc[:, 1] / zs + intr.cv], axis=1)
    return uv, z, ok


def project_point(intr: CameraIntrinsics, pose: Pose, p, near: float = NEAR_PLANE) -> tuple[float, float, float]:
    """Continuous pixel coordinates and camera depth of world point ``p``.

    Raises:
        BehindCamera: if the camera-frame depth is at or behind ``near``.
    """
    if not np.all(np.isfinite(p)):
        raise GeometryError("point is not finite")
    x, y, z = pose.world_to_camera(np.asarray(p, dtype=np.float64).reshape(3))
    if z <= near:
        raise BehindCamera(f"point depth {z:.4g} m is behind the near plane {near} m")
    return intr.fx * x / z + intr.cu, intr.fy * y / z + intr.cv, z
