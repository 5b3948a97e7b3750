"""Photometric, depth and semantic losses with their image-space gradients."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)

C1 = 0.01 ** 2
C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    lambda_ssim: float = 0.2
    w_depth: float = 0.5
    w_sem: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError("lambda_ssim must lie in [0, 1]")
        if self.w_depth < 0 or self.w_sem < 0:
            raise ValueError("loss weights must be non-negative")


def gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2.0 * sigma * sigma))
    return g / g.sum()


def _blur(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # separable, zero padded, same-size output; symmetric kernel => self-adjoint
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, return_grad: bool = False):
    """Mean structural similarity of two images in [0, 1] (H x W or H x W x C).

    With ``return_grad`` also returns d(mean SSIM)/d``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b)
    squeeze = a.ndim == 2
    if squeeze:
        a, b = a[..., None], b[..., None]
    win = gaussian_window(window)
    n = a.size
    total = 0.0
    grad = np.empty_like(a) if return_grad else None
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _blur(x, win), _blur(y, win)
        pxx, pyy, pxy = _blur(x * x, win), _blur(y * y, win), _blur(x * y, win)
        vx, vy, cxy = pxx - mx * mx, pyy - my * my, pxy - mx * my
        A1 = 2 * mx * my + C1
        A2 = 2 * cxy + C2
        B1 = mx * mx + my * my + C1
        B2 = vx + vy + C2
        s = (A1 * A2) / (B1 * B2)
        total += s.sum()
        if return_grad:
            d_mx = s * (2 * my / A1 - 2 * my / A2 - 2 * mx / B1 + 2 * mx / B2)
            d_pxx = -s / B2
            d_pxy = 2 * s / A2
            grad[..., ch] = (_blur(d_mx, win) + 2 * x * _blur(d_pxx, win) + y * _blur(d_pxy, win)) / n
    value = total / n
    if return_grad:
        return value, (grad[..., 0] if squeeze else grad)
    return value


def loss_rgb(rendered: np.ndarray, target: np.ndarray, lambda_ssim: float = 0.2, window: int = 11,
             return_grad: bool = False):
    """(1 - lambda) * mean|I_hat - I| + lambda * (1 - SSIM(I_hat, I))."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check(r, t)
    diff = r - t
    l1 = np.abs(diff).mean()
    if lambda_ssim > 0:
        out = ssim(r, t, window, return_grad)
        s, gs = out if return_grad else (out, None)
    else:
        s, gs = 1.0, None
    value = (1 - lambda_ssim) * l1 + lambda_ssim * (1 - s)
    if not return_grad:
        return value
    g = (1 - lambda_ssim) * np.sign(diff) / diff.size
    if gs is not None:
        g = g - lambda_ssim * gs
    return value, g


def masked_l1(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None,
              return_grad: bool = False):
    """Mean absolute error over ``mask``; 0 (with a warning) when the mask is empty.

    Returns ``(value, empty_flag)`` or ``(value, empty_flag, grad)``.
    """
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check(r, t)
    m = np.ones(r.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    _check(r, m)
    count = int(m.sum())
    if count == 0:
        log.debug("loss over zero valid pixels; returning 0")
        return (0.0, True, np.zeros_like(r)) if return_grad else (0.0, True)
    diff = np.where(m, r - t, 0.0)
    value = np.abs(diff).sum() / count
    if return_grad:
        return value, False, np.sign(diff) / count
    return value, False


def loss_depth(rendered_depth, target_depth, return_grad: bool = False):
    """L1 over pixels with a valid (> 0) target depth."""
    t = np.asarray(target_depth, dtype=np.float64)
    return masked_l1(rendered_depth, t, np.isfinite(t) & (t > 0), return_grad)


def loss_sem(rendered_sem, target_sem, labeled=None, return_grad: bool = False):
    """L1 over labeled pixels (``labeled`` mask, default: all)."""
    return masked_l1(rendered_sem, target_sem, labeled, return_grad)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
