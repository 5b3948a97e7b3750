"""Full-batch Adam fitting of a Gaussian map to RGB-D(-semantic) observations."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..gaussians import GaussianMap
from ..rasterizer import RenderConfig
from .gradients import PARAM_GROUPS, Frame, LossBreakdown, backward, evaluate, map_from_params, params_from_map
from .losses import LossWeights

log = logging.getLogger(__name__)

DEFAULT_LR = {
    "mu": 1.6e-3,
    "log_scale": 5e-3,
    "quat": 1e-3,
    "opacity_logit": 5e-2,
    "color_logit": 2.5e-2,
    "semantic": 1e-2,
}


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 15
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    ssim_window: int = 11
    divergence_factor: float = 10.0
    # no update while the loss is below this; Adam would otherwise amplify
    # rounding-level L1 subgradients at an exact optimum into full-size steps
    converged_loss: float = 1e-10

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        missing = set(PARAM_GROUPS) - set(self.lr)
        if missing:
            raise ValueError(f"missing learning rates for {sorted(missing)}")
        if any(v <= 0 for v in self.lr.values()):
            raise ValueError("learning rates must be positive")

    def with_lr(self, **scale) -> "FitConfig":
        lr = dict(self.lr)
        lr.update(scale)
        return FitConfig(self.iterations, lr, self.betas, self.eps, self.ssim_window, self.divergence_factor,
                         self.converged_loss)


@dataclass
class IterationRecord:
    iteration: int
    loss_rgb: float
    loss_depth: float
    loss_sem: float
    total: float
    psnr: float


@dataclass
class FitReport:
    records: list[IterationRecord]
    initial: LossBreakdown
    final_psnr: float
    final_depth_mae: float
    final_sem_mae: float
    wall_seconds: float
    events: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        # wall-clock is deliberately left out so serialised reports are reproducible
        return {
            "iterations": [_finite(asdict(r)) for r in self.records],
            "initial": _finite({k: getattr(self.initial, k) for k in
                                ("loss_rgb", "loss_depth", "loss_sem", "total", "psnr")}),
            "final": _finite({"psnr": self.final_psnr, "depth_mae": self.final_depth_mae,
                              "sem_mae": self.final_sem_mae}),
            "events": list(self.events),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _finite(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, float) and not math.isfinite(v):
            v = "inf" if v > 0 else ("-inf" if v < 0 else "nan")
        out[k] = v
    return out


class Adam:
    """Adam over a dict of named arrays with per-group learning rates."""

    def __init__(self, lr: dict[str, float], betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = dict(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr[k] * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def fit_map(gmap: GaussianMap, frames: list[Frame], cfg: FitConfig = FitConfig(),
            weights: LossWeights = LossWeights(), rcfg: RenderConfig = RenderConfig()):
    """Run ``cfg.iterations`` full-batch Adam steps over all frames.

    Returns ``(fitted map, FitReport)``.  The fitted map keeps the input's
    dtype, frame tag and metadata.  Record ``i`` holds the loss evaluated
    *before* step ``i``; the report's ``final_*`` fields are measured on the
    returned map.
    """
    if not frames:
        raise ValueError("fit_map needs at least one frame")
    if len(gmap) == 0:
        raise ValueError("fit_map needs a non-empty map")
    t0 = time.perf_counter()
    params = params_from_map(gmap)
    opt = Adam(cfg.lr, cfg.betas, cfg.eps)
    records: list[IterationRecord] = []
    events: list[str] = []
    initial = None
    cur = gmap.astype(np.float64)
    for it in range(cfg.iterations):
        rep, grads = backward(cur, frames, weights, rcfg, cfg.ssim_window)
        if initial is None:
            initial = rep
            # empty-mask notices repeat every iteration; report them once
            for w in sorted(set(rep.warnings)):
                events.append(f"{w} in {rep.warnings.count(w)} of {len(frames)} frames")
        elif rep.total > cfg.divergence_factor * max(initial.total, 1e-12):
            for k in opt.lr:
                opt.lr[k] *= 0.5
            events.append(f"iteration {it}: loss {rep.total:.4g} exceeded {cfg.divergence_factor}x initial; "
                          f"learning rates halved")
            log.warning(events[-1])
        records.append(IterationRecord(it, rep.loss_rgb, rep.loss_depth, rep.loss_sem, rep.total, rep.psnr))
        if rep.total < cfg.converged_loss:
            continue
        opt.step(params, grads)
        q = params["quat"]
        params["quat"] = q / np.linalg.norm(q, axis=1, keepdims=True)
        cur = map_from_params(params, like=gmap)
    final = evaluate(cur, frames, weights, rcfg, cfg.ssim_window)
    out = cur.astype(gmap.mu.dtype)
    report = FitReport(records, initial, final.psnr, final.depth_mae, final.sem_mae,
                       time.perf_counter() - t0, events)
    return out, report
