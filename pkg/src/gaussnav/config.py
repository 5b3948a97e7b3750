"""Every tunable default in one record.

``RunConfig`` nests the per-module configs.  Each field is documented where
it is declared; this module only gathers them:

* ``scene``    SceneConfig    room grid, instances per room, Gaussians per instance
* ``observe``  ObserveConfig  K views, field of view, resolution (224 px)
* ``build``    MapBuildConfig fit budget (15 iterations), init, loss weights, voxel size
* ``render``   RenderConfig   tile size, culling thresholds, background, worker count
* ``policy``   PolicyConfig   view cone, step cap, backtrack weight
* ``train``    TrainConfig    scorer training steps, learning rate, seed
* ``episodes`` EpisodeConfig  episodes per scene, minimum start-goal distance
* ``metrics``  MetricsConfig  success radius, distance mode

Environment variables are never consulted.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .gaussians import InitConfig
from .metrics import MetricsConfig
from .navigation.episodes import EpisodeConfig
from .navigation.mapping import MapBuildConfig, ObserveConfig
from .navigation.policy import PolicyConfig
from .navigation.scene import SceneConfig
from .navigation.training import TrainConfig
from .optimizer.fit import FitConfig
from .optimizer.losses import LossWeights
from .rasterizer import RenderConfig


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    observe: ObserveConfig = field(default_factory=ObserveConfig)
    build: MapBuildConfig = field(default_factory=MapBuildConfig)
    # output does not depend on the tile size; 8 px tiles are faster at these image sizes
    render: RenderConfig = field(default_factory=lambda: RenderConfig(tile_size=8))
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    episodes: EpisodeConfig = field(default_factory=EpisodeConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = d or {}
        b = d.get("build", {})
        build = MapBuildConfig(
            fit=_make(FitConfig, b.get("fit", {})), init=_make(InitConfig, b.get("init", {})),
            weights=_make(LossWeights, b.get("weights", {})), voxel_size=b.get("voxel_size"))
        return cls(scene=_make(SceneConfig, d.get("scene", {})), observe=_make(ObserveConfig, d.get("observe", {})),
                   build=build, render=_make(RenderConfig, d.get("render", {})),
                   policy=_make(PolicyConfig, d.get("policy", {})), train=_make(TrainConfig, d.get("train", {})),
                   episodes=_make(EpisodeConfig, d.get("episodes", {})),
                   metrics=_make(MetricsConfig, d.get("metrics", {})))

    def replace(self, **sections) -> "RunConfig":
        """Copy with some sections replaced, e.g. ``cfg.replace(render=...)``."""
        return dataclasses.replace(self, **sections)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _make(cls, d: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    base = cls()
    kw = {k: tuple(v) if isinstance(getattr(base, k), tuple) and isinstance(v, list) else v for k, v in d.items()}
    return cls(**kw)
