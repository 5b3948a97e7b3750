"""Analytic gradients of the map-fitting loss w.r.t. raw Gaussian parameters.

Raw (unconstrained) parameterisation used by the optimizer:

* ``mu``             world position
* ``log_scale``      log of per-axis standard deviations
* ``quat``           quaternion; the map uses ``quat / |quat|``
* ``opacity_logit``  opacity = sigmoid(opacity_logit)
* ``color_logit``    color = sigmoid(color_logit)
* ``semantic``       the compact semantic code, unconstrained
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..gaussians import GaussianMap
from ..geometry import CameraIntrinsics, Pose
from ..rasterizer import RenderConfig, composite_adjoint, project_map, projection_adjoint, render_splats
from .losses import LossWeights, loss_depth, loss_rgb, loss_sem, psnr

PARAM_GROUPS = ("mu", "log_scale", "quat", "opacity_logit", "color_logit", "semantic")
_LOGIT_EPS = 1e-6


@dataclass
class Frame:
    """One supervised view: camera + RGB target, optional depth and semantic targets.

    ``sem_mask`` marks labeled pixels; unlabeled pixels are excluded from the
    semantic loss.
    """

    intr: CameraIntrinsics
    pose: Pose
    rgb: np.ndarray
    depth: np.ndarray | None = None
    semantic: np.ndarray | None = None
    sem_mask: np.ndarray | None = None


@dataclass
class LossBreakdown:
    loss_rgb: float
    loss_depth: float
    loss_sem: float
    total: float
    psnr: float
    depth_mae: float
    sem_mae: float
    warnings: list[str] = field(default_factory=list)


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), _LOGIT_EPS, 1 - _LOGIT_EPS)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def params_from_map(gmap: GaussianMap) -> dict[str, np.ndarray]:
    f = lambda a: np.asarray(a, dtype=np.float64).copy()  # noqa: E731
    return {
        "mu": f(gmap.mu),
        "log_scale": np.log(f(gmap.scale)),
        "quat": f(gmap.rotation),
        "opacity_logit": _logit(gmap.opacity),
        "color_logit": _logit(gmap.color),
        "semantic": f(gmap.semantic),
    }


def map_from_params(params: dict[str, np.ndarray], like: GaussianMap | None = None, dtype=np.float64) -> GaussianMap:
    q = params["quat"]
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    kw = {} if like is None else {"frame": like.frame, "step": like.step, "meta": dict(like.meta)}
    return GaussianMap(
        mu=params["mu"].astype(dtype), scale=np.exp(params["log_scale"]).astype(dtype),
        rotation=q.astype(dtype), opacity=_sigmoid(params["opacity_logit"]).astype(dtype),
        color=_sigmoid(params["color_logit"]).astype(dtype), semantic=params["semantic"].astype(dtype), **kw)


def frame_loss(gmap: GaussianMap, frame: Frame, weights: LossWeights, rcfg: RenderConfig,
               window: int = 11, with_grad: bool = True):
    """Loss of one view and (optionally) its per-Gaussian gradient w.r.t. map values."""
    spl = project_map(gmap, frame.intr, frame.pose, rcfg)
    out = render_splats(spl, frame.intr, rcfg, keep_state=with_grad)
    H, W = frame.intr.height, frame.intr.width
    warn = []
    l_rgb, g_rgb = loss_rgb(out.rgb, frame.rgb, weights.lambda_ssim, window, return_grad=True)
    l_d, g_d, l_s, g_s = 0.0, np.zeros((H, W)), 0.0, np.zeros((H, W))
    if frame.depth is not None:
        l_d, empty, g_d = loss_depth(out.depth, frame.depth, return_grad=True)
        if empty:
            warn.append("depth: no valid pixels")
    if frame.semantic is not None:
        l_s, empty, g_s = loss_sem(out.semantic, frame.semantic, frame.sem_mask, return_grad=True)
        if empty:
            warn.append("semantic: no labeled pixels")
    total = l_rgb + weights.w_depth * l_d + weights.w_sem * l_s
    stats = {"loss_rgb": l_rgb, "loss_depth": l_d, "loss_sem": l_s, "total": total,
             "psnr": psnr(out.rgb, frame.rgb), "depth_mae": l_d, "sem_mae": l_s, "warnings": warn}
    if not with_grad:
        return stats, None
    ca = composite_adjoint(spl, frame.intr, rcfg, g_rgb, weights.w_depth * g_d, weights.w_sem * g_s,
                           state=out.state)
    pa = projection_adjoint(spl, frame.intr, frame.pose, ca["mu2d"], ca["conic"], ca["z"])
    n = len(gmap)
    grads = {"mu": np.zeros((n, 3)), "scale": np.zeros((n, 3)), "rotation": np.zeros((n, 4)),
             "opacity": np.zeros(n), "color": np.zeros((n, 3)), "semantic": np.zeros(n)}
    idx = spl.index
    grads["mu"][idx] = pa["mu"]
    grads["scale"][idx] = pa["scale"]
    grads["rotation"][idx] = pa["rotation"]
    grads["opacity"][idx] = ca["opacity"]
    grads["color"][idx] = ca["color"]
    grads["semantic"][idx] = ca["semantic"]
    return stats, grads


def backward(gmap: GaussianMap, frames: list[Frame], weights: LossWeights = LossWeights(),
             rcfg: RenderConfig = RenderConfig(), window: int = 11):
    """Total loss (mean over frames) and its gradient w.r.t. the raw parameter groups.

    Returns ``(LossBreakdown, grads)`` where ``grads`` maps each name in
    :data:`PARAM_GROUPS` to an array shaped like the parameter.
    """
    if not frames:
        raise ValueError("backward needs at least one frame")
    n = len(gmap)
    acc = {"mu": np.zeros((n, 3)), "scale": np.zeros((n, 3)), "rotation": np.zeros((n, 4)),
           "opacity": np.zeros(n), "color": np.zeros((n, 3)), "semantic": np.zeros(n)}
    sums = {k: 0.0 for k in ("loss_rgb", "loss_depth", "loss_sem", "psnr", "depth_mae", "sem_mae")}
    warnings = []
    for fr in frames:
        st, g = frame_loss(gmap, fr, weights, rcfg, window)
        for k in acc:
            acc[k] += g[k]
        for k in sums:
            sums[k] += st[k]
        warnings += st["warnings"]
    K = len(frames)
    mean = {k: v / K for k, v in sums.items()}
    total = mean["loss_rgb"] + weights.w_depth * mean["loss_depth"] + weights.w_sem * mean["loss_sem"]
    report = LossBreakdown(mean["loss_rgb"], mean["loss_depth"], mean["loss_sem"], total, mean["psnr"],
                           mean["depth_mae"], mean["sem_mae"], warnings)
    op = np.asarray(gmap.opacity, dtype=np.float64)
    col = np.asarray(gmap.color, dtype=np.float64)
    q = np.asarray(gmap.rotation, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    grads = {
        "mu": acc["mu"] / K,
        "log_scale": acc["scale"] / K * np.asarray(gmap.scale, dtype=np.float64),
        # tangent-space gradient w.r.t. the unit quaternion, rescaled for |q| != 1
        "quat": acc["rotation"] / K / qn,
        "opacity_logit": acc["opacity"] / K * op * (1 - op),
        "color_logit": acc["color"] / K * col * (1 - col),
        "semantic": acc["semantic"] / K,
    }
    return report, grads


def evaluate(gmap: GaussianMap, frames: list[Frame], weights: LossWeights = LossWeights(),
             rcfg: RenderConfig = RenderConfig(), window: int = 11) -> LossBreakdown:
    """Loss breakdown without gradients."""
    sums = {k: 0.0 for k in ("loss_rgb", "loss_depth", "loss_sem", "psnr", "depth_mae", "sem_mae")}
    warnings = []
    for fr in frames:
        st, _ = frame_loss(gmap, fr, weights, rcfg, window, with_grad=False)
        for k in sums:
            sums[k] += st[k]
        warnings += st["warnings"]
    K = len(frames)
    m = {k: v / K for k, v in sums.items()}
    total = m["loss_rgb"] + weights.w_depth * m["loss_depth"] + weights.w_sem * m["loss_sem"]
    return LossBreakdown(m["loss_rgb"], m["loss_depth"], m["loss_sem"], total, m["psnr"],
                         m["depth_mae"], m["sem_mae"], warnings)
