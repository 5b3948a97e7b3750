"""Panoramic observation of the ground-truth world and per-node local map building."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..gaussians import GaussianMap, InitConfig, InitializationError, init_from_pointcloud
from ..geometry import CameraIntrinsics, PointCloud, Pose, backproject_frame
from ..optimizer.fit import FitConfig, FitReport, fit_map
from ..optimizer.gradients import Frame
from ..optimizer.losses import LossWeights
from ..rasterizer import RenderConfig, render
from ..semantics import SemanticProvider
from .scene import SyntheticScene

# voxel cell (m) that keeps roughly one Gaussian per pixel footprint at 224 px
VOXEL_AT_224 = 0.05


@dataclass(frozen=True)
class ObserveConfig:
    views: int = 4
    fov_deg: float = 90.0
    resolution: int = 224
    # depth is reported where at least this much opacity was accumulated
    min_depth_alpha: float = 0.5

    def __post_init__(self) -> None:
        if self.views < 1:
            raise ValueError("need at least one view")
        if not 0 < self.fov_deg < 180:
            raise ValueError("fov must lie in (0, 180) degrees")
        if self.resolution < 1:
            raise ValueError("resolution must be positive")


@dataclass
class Observation:
    view: int
    intr: CameraIntrinsics
    pose: Pose
    rgb: np.ndarray
    depth: np.ndarray
    instance_ids: np.ndarray


def observe(scene: SyntheticScene, node: int, cfg: ObserveConfig = ObserveConfig(),
            rcfg: RenderConfig = RenderConfig()) -> list[Observation]:
    """``cfg.views`` pinhole views at azimuths 2*pi*k/K from the node's camera position.

    Depth behaves like a range sensor: the composited depth divided by the
    accumulated opacity, and 0 wherever less than ``min_depth_alpha`` opacity
    was accumulated (e.g. open sky).
    """
    if not 0 <= node < len(scene.graph):
        raise IndexError(f"node {node} is not in the graph")
    intr = CameraIntrinsics.from_fov(cfg.resolution, cfg.resolution, cfg.fov_deg)
    eye = scene.graph.positions[node] + np.array([0.0, 0.0, scene.cfg.camera_height])
    out = []
    for k in range(cfg.views):
        pose = Pose.look_along(eye, 2 * math.pi * k / cfg.views)
        fr = render(scene.gmap, intr, pose, rcfg)
        ok = fr.alpha_acc >= cfg.min_depth_alpha
        depth = np.where(ok, fr.depth / np.maximum(fr.alpha_acc, 1e-12), 0.0)
        lookup = np.concatenate([[0], scene.gaussian_instance])  # dominant -1 -> 0
        inst = np.where(ok, lookup[fr.dominant + 1], 0)
        out.append(Observation(k, intr, pose, fr.rgb, depth, inst))
    return out


@dataclass(frozen=True)
class MapBuildConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    init: InitConfig = field(default_factory=InitConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    # None: scale VOXEL_AT_224 with the image resolution
    voxel_size: float | None = None


def voxel_for(resolution: int) -> float:
    return VOXEL_AT_224 * 224.0 / resolution


def build_local_map(observations: list[Observation], provider: SemanticProvider,
                    cfg: MapBuildConfig = MapBuildConfig(), rcfg: RenderConfig = RenderConfig()):
    """Back-project all views, initialise Gaussians, then fit color, depth and semantics.

    Returns ``(map, FitReport)``.  Raises InitializationError when no view
    has valid depth.
    """
    if not observations:
        raise ValueError("build_local_map needs at least one observation")
    clouds, frames = [], []
    for ob in observations:
        ann = provider.annotate(ob.rgb, ob.view, ob.instance_ids)
        clouds.append(backproject_frame(ob.intr, ob.pose, ob.depth, ob.rgb, ann.region_ids))
        frames.append(Frame(ob.intr, ob.pose, ob.rgb, ob.depth, ann.target, ann.labeled))
    pc = PointCloud.concat(clouds)
    voxel = cfg.voxel_size if cfg.voxel_size is not None else voxel_for(observations[0].intr.width)
    init = InitConfig(**{**cfg.init.__dict__, "voxel_size": voxel})
    gmap = init_from_pointcloud(pc, init)
    return fit_map(gmap, frames, cfg.fit, cfg.weights, rcfg)


@dataclass
class NodeMap:
    node: int
    gmap: GaussianMap | None
    report: FitReport | None
    observations: list[Observation]


class SceneMaps:
    """Lazily built, cached local maps for every node of one scene."""

    def __init__(self, scene: SyntheticScene, provider: SemanticProvider,
                 observe_cfg: ObserveConfig = ObserveConfig(), build_cfg: MapBuildConfig = MapBuildConfig(),
                 rcfg: RenderConfig = RenderConfig()):
        self.scene = scene
        self.provider = provider
        self.observe_cfg = observe_cfg
        self.build_cfg = build_cfg
        self.rcfg = rcfg
        self._cache: dict[int, NodeMap] = {}

    def get(self, node: int) -> NodeMap:
        if node not in self._cache:
            obs = observe(self.scene, node, self.observe_cfg, self.rcfg)
            try:
                gmap, rep = build_local_map(obs, self.provider, self.build_cfg, self.rcfg)
            except InitializationError:
                gmap, rep = None, None
            self._cache[node] = NodeMap(node, gmap, rep, obs)
        return self._cache[node]

    def build_all(self) -> list[NodeMap]:
        return [self.get(n) for n in range(len(self.scene.graph))]
