"""Differentiable splatting of Gaussian maps into color, depth and semantic rasters.

Two forward routes share the projection step:

* :func:`render` bins splats into screen tiles and composites each tile as a
  dense (gaussians x pixels) block, with early termination once a pixel's
  transmittance falls below ``RenderConfig.early_stop``.
* :func:`render_reference` is the brute-force check: every splat against
  every pixel, one splat at a time, in global depth order, no early stop.

Both apply the same per-pixel support rule: a splat contributes at a pixel
only when its Mahalanobis distance is within ``footprint_sigma`` and
``alpha' >= alpha_cull``.  Tile binning uses the tight bounding box of that
ellipse, so binning never drops a contribution the reference keeps.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianMap, covariance_from, quat_rotmat_jacobian, quat_to_rotmat
from .geometry import NEAR_PLANE, CameraIntrinsics, Pose

# elements of a (tiles x gaussians x pixels) block processed at once
_CHUNK_ELEMS = 1 << 21
_MIN_BLOCK = 1 << 14


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    alpha_cull: float = 1.0 / 255.0
    footprint_sigma: float = 3.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    near_plane: float = NEAR_PLANE
    early_stop: float = 1e-6
    blur: float = 0.3
    alpha_max: float = 0.999
    # splats whose center falls outside this multiple of the half-image are culled;
    # the affine footprint approximation degenerates for very oblique Gaussians
    guard_band: float = 1.3
    workers: int = 1
    # precision of the per-pixel compositing blocks ("float64" or "float32")
    compute_dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if not 0 < self.alpha_cull < 1:
            raise ValueError("alpha_cull must lie in (0, 1)")
        if self.footprint_sigma <= 0:
            raise ValueError("footprint_sigma must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.guard_band <= 0:
            raise ValueError("guard_band must be positive")
        if self.compute_dtype not in ("float64", "float32"):
            raise ValueError("compute_dtype must be float64 or float32")


@dataclass
class RenderedFrame:
    rgb: np.ndarray        # (H, W, 3)
    depth: np.ndarray      # (H, W)
    semantic: np.ndarray   # (H, W)
    alpha_acc: np.ndarray  # (H, W)
    dominant: np.ndarray | None = None  # (H, W) index of max-weight Gaussian, -1 if none
    # forward compositing state kept for a following composite_adjoint call
    state: object = field(default=None, repr=False, compare=False)

    @classmethod
    def background_frame(cls, h: int, w: int, bg) -> "RenderedFrame":
        rgb = np.empty((h, w, 3))
        rgb[:] = np.asarray(bg, dtype=np.float64)
        return cls(rgb, np.zeros((h, w)), np.zeros((h, w)), np.zeros((h, w)), np.full((h, w), -1))


@dataclass
class SplattedGaussian:
    index: int
    mu2d: np.ndarray
    cov2d: np.ndarray
    z: float
    opacity: float
    color: np.ndarray
    semantic: float


@dataclass
class Splats:
    """Projected map, struct-of-arrays over the *visible* Gaussians, sorted
    front to back (ties by source index).  Intermediate quantities needed by
    the adjoint are kept alongside."""

    index: np.ndarray    # (n,) source Gaussian ids
    mu2d: np.ndarray     # (n, 2)
    cov2d: np.ndarray    # (n, 2, 2)
    conic: np.ndarray    # (n, 3)  a, b, c of the inverse 2D covariance
    radius: np.ndarray   # (n, 2)  bounding-box half extents in pixels
    z: np.ndarray        # (n,)
    opacity: np.ndarray
    color: np.ndarray    # (n, 3)
    semantic: np.ndarray
    p_cam: np.ndarray    # (n, 3)
    J: np.ndarray        # (n, 2, 3)
    cov_cam: np.ndarray  # (n, 3, 3)
    R: np.ndarray        # (n, 3, 3) Gaussian rotations
    scale: np.ndarray    # (n, 3)
    quat: np.ndarray     # (n, 4) normalised

    def __len__(self) -> int:
        return len(self.index)


def _project(gmap: GaussianMap, intr: CameraIntrinsics, pose: Pose, cfg: RenderConfig) -> Splats:
    mu = np.asarray(gmap.mu, dtype=np.float64)
    p = pose.world_to_camera(mu)
    z = p[:, 2]
    front = z > cfg.near_plane
    idx = np.flatnonzero(front)
    p = p[idx]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fx, fy = intr.fx, intr.fy
    u = fx * x / z + intr.cu
    v = fy * y / z + intr.cv

    q = np.asarray(gmap.rotation, dtype=np.float64)[idx]
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    s = np.asarray(gmap.scale, dtype=np.float64)[idx]
    R = quat_to_rotmat(q)
    M = R * s[:, None, :]
    cov = M @ np.swapaxes(M, 1, 2)
    W = pose.rotation.T
    cov_cam = W @ cov @ W.T
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z ** 2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z ** 2
    c2 = J @ cov_cam @ np.swapaxes(J, 1, 2)
    c2[:, 0, 0] += cfg.blur
    c2[:, 1, 1] += cfg.blur
    # symmetrise against round-off in the triple product
    off = 0.5 * (c2[:, 0, 1] + c2[:, 1, 0])
    c2[:, 0, 1] = off
    c2[:, 1, 0] = off
    det = c2[:, 0, 0] * c2[:, 1, 1] - off * off
    conic = np.stack([c2[:, 1, 1] / det, -off / det, c2[:, 0, 0] / det], axis=1)
    fs = cfg.footprint_sigma
    radius = np.stack([fs * np.sqrt(c2[:, 0, 0]), fs * np.sqrt(c2[:, 1, 1])], axis=1)

    gw = cfg.guard_band * intr.width / 2
    gh = cfg.guard_band * intr.height / 2
    cx, cy = (intr.width - 1) / 2, (intr.height - 1) / 2
    inside = ((np.abs(u - cx) <= gw) & (np.abs(v - cy) <= gh)
              & (u + radius[:, 0] >= 0) & (u - radius[:, 0] <= intr.width - 1)
              & (v + radius[:, 1] >= 0) & (v - radius[:, 1] <= intr.height - 1))
    keep = np.flatnonzero(inside)
    # depth order; kind="stable" keeps ascending source index on ties
    keep = keep[np.argsort(z[keep], kind="stable")]

    pick = lambda a: a[keep]  # noqa: E731
    return Splats(
        index=idx[keep],
        mu2d=np.stack([u, v], axis=1)[keep],
        cov2d=c2[keep],
        conic=conic[keep],
        radius=radius[keep],
        z=pick(z),
        opacity=np.asarray(gmap.opacity, dtype=np.float64)[idx][keep],
        color=np.asarray(gmap.color, dtype=np.float64)[idx][keep],
        semantic=np.asarray(gmap.semantic, dtype=np.float64)[idx][keep],
        p_cam=p[keep], J=J[keep], cov_cam=cov_cam[keep], R=R[keep], scale=s[keep], quat=q[keep],
    )


def project_map(gmap: GaussianMap, intr: CameraIntrinsics, pose: Pose,
                cfg: RenderConfig = RenderConfig()) -> Splats:
    """Project every Gaussian that survives near-plane and image culling."""
    return _project(gmap, intr, pose, cfg)


def splat(g, intr: CameraIntrinsics, pose: Pose, cfg: RenderConfig = RenderConfig()) -> SplattedGaussian | None:
    """Project one Gaussian; ``None`` when culled."""
    one = GaussianMap.from_gaussians([g], dtype=np.float64)
    s = _project(one, intr, pose, cfg)
    if len(s) == 0:
        return None
    return SplattedGaussian(0, s.mu2d[0], s.cov2d[0], float(s.z[0]), float(s.opacity[0]),
                            s.color[0], float(s.semantic[0]))


def alpha_at(s: SplattedGaussian, pixel, cfg: RenderConfig = RenderConfig()) -> float:
    """Opacity-weighted Gaussian falloff at ``pixel``, clamped to ``alpha_max``.

    Returns 0 outside the support (beyond ``footprint_sigma`` or below ``alpha_cull``).
    """
    d = np.asarray(pixel, dtype=np.float64) - s.mu2d
    m = float(d @ np.linalg.solve(s.cov2d, d))
    raw = s.opacity * math.exp(-0.5 * m)
    if m > cfg.footprint_sigma ** 2 or raw < cfg.alpha_cull:
        return 0.0
    return min(raw, cfg.alpha_max)


# --------------------------------------------------------------------------- binning

@dataclass
class _Bins:
    tiles_x: int
    tiles_y: int
    start: np.ndarray   # (n_tiles,) offset into order
    count: np.ndarray   # (n_tiles,)
    order: np.ndarray   # splat positions (into Splats arrays), depth-ordered per tile


def _bin(spl: Splats, intr: CameraIntrinsics, ts: int) -> _Bins:
    W, H = intr.width, intr.height
    tx_n = -(-W // ts)
    ty_n = -(-H // ts)
    u, v = spl.mu2d[:, 0], spl.mu2d[:, 1]
    rx, ry = spl.radius[:, 0], spl.radius[:, 1]
    px0 = np.clip(np.ceil(u - rx), 0, W - 1).astype(np.int64)
    px1 = np.clip(np.floor(u + rx), 0, W - 1).astype(np.int64)
    py0 = np.clip(np.ceil(v - ry), 0, H - 1).astype(np.int64)
    py1 = np.clip(np.floor(v + ry), 0, H - 1).astype(np.int64)
    tx0, tx1, ty0, ty1 = px0 // ts, px1 // ts, py0 // ts, py1 // ts
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    cnt = nx * ny
    src = np.repeat(np.arange(len(spl)), cnt)
    first = np.repeat(np.cumsum(cnt) - cnt, cnt)
    k = np.arange(len(src)) - first
    tx = tx0[src] + k % nx[src]
    ty = ty0[src] + k // nx[src]
    tile = ty * tx_n + tx
    # src is already in depth order; a stable sort by tile preserves it
    perm = np.argsort(tile, kind="stable")
    tile_sorted = tile[perm]
    n_tiles = tx_n * ty_n
    counts = np.bincount(tile_sorted, minlength=n_tiles)
    starts = np.cumsum(counts) - counts
    return _Bins(tx_n, ty_n, starts, counts, src[perm])


def _chunks(bins: _Bins, ts: int) -> list[np.ndarray]:
    """Group non-empty tiles so every padded block stays under the element budget.

    Depends only on the binning, never on the worker count.
    """
    P = ts * ts
    tiles = np.flatnonzero(bins.count > 0)
    # similar list lengths share a block, which keeps padding small
    tiles = tiles[np.argsort(bins.count[tiles], kind="stable")]
    out, cur, cur_max, cur_min = [], [], 0, 0
    for t in tiles:
        c = int(bins.count[t])
        new_max = max(cur_max, c)
        full = new_max * P * (len(cur) + 1) > _CHUNK_ELEMS
        # counts ascend, so cap the padding of a block at ~25% once it is big enough
        ragged = c > 1.25 * cur_min and cur_max * P * len(cur) >= _MIN_BLOCK
        if cur and (full or ragged):
            out.append(np.array(cur))
            cur, new_max = [], c
        if not cur:
            cur_min = c
        cur.append(t)
        cur_max = new_max
    if cur:
        out.append(np.array(cur))
    return out


def _tile_pixels(tiles: np.ndarray, bins: _Bins, intr: CameraIntrinsics, ts: int):
    ty, tx = np.divmod(tiles, bins.tiles_x)
    oy, ox = np.divmod(np.arange(ts * ts), ts)
    px = tx[:, None] * ts + ox[None, :]
    py = ty[:, None] * ts + oy[None, :]
    valid = (px < intr.width) & (py < intr.height)
    return px, py, valid


# --------------------------------------------------------------------------- compositing

@dataclass
class _Compute:
    """Per-splat arrays in the block compute precision."""

    mu2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    feats: np.ndarray   # color (3), z, semantic
    index: np.ndarray


def _compute_view(spl: Splats, cfg: RenderConfig) -> _Compute:
    dt = np.dtype(cfg.compute_dtype)
    feats = np.concatenate([spl.color, spl.z[:, None], spl.semantic[:, None]], axis=1)
    return _Compute(spl.mu2d.astype(dt), spl.conic.astype(dt), spl.opacity.astype(dt), feats.astype(dt), spl.index)


class _Block:
    """Forward state of one padded block of tiles, reused by the adjoint."""

    def __init__(self, spl: _Compute, tiles, bins: _Bins, intr, cfg: RenderConfig, early_stop: float):
        ts = cfg.tile_size
        dt = spl.mu2d.dtype
        L = int(bins.count[tiles].max())
        off = np.arange(L)
        pos = bins.start[tiles][:, None] + off[None, :]
        has = off[None, :] < bins.count[tiles][:, None]
        ids = np.where(has, bins.order[np.minimum(pos, len(bins.order) - 1)], 0)
        px, py, pvalid = _tile_pixels(tiles, bins, intr, ts)
        fpx, fpy = px.astype(dt), py.astype(dt)

        dx = fpx[:, None, :] - spl.mu2d[ids, 0][:, :, None]
        dy = fpy[:, None, :] - spl.mu2d[ids, 1][:, :, None]
        a = spl.conic[ids, 0][:, :, None]
        b = spl.conic[ids, 1][:, :, None]
        c = spl.conic[ids, 2][:, :, None]
        m = a * dx * dx + 2 * b * dx * dy + c * dy * dy
        g = np.exp(m * dt.type(-0.5))
        raw = spl.opacity[ids][:, :, None] * g
        support = has[:, :, None] & pvalid[:, None, :] & (m <= cfg.footprint_sigma ** 2) & (raw >= cfg.alpha_cull)
        alpha = np.where(support, np.minimum(raw, dt.type(cfg.alpha_max)), dt.type(0))
        one_m = 1 - alpha
        T = np.cumprod(one_m, axis=1)
        T_excl = np.concatenate([np.ones_like(T[:, :1]), T[:, :-1]], axis=1)
        if early_stop > 0:
            live = T_excl >= early_stop
            if not live.all():
                alpha = np.where(live, alpha, dt.type(0))
                support &= live
                one_m = 1 - alpha
                T = np.cumprod(one_m, axis=1)
                T_excl = np.concatenate([np.ones_like(T[:, :1]), T[:, :-1]], axis=1)
        self.ids, self.px, self.py, self.pvalid = ids, px, py, pvalid
        self.dx, self.dy, self.a, self.b, self.c = dx, dy, a, b, c
        self.g, self.raw, self.support, self.alpha = g, raw, support, alpha
        self.one_m, self.T_excl = one_m, T_excl
        self.T_final = T[:, -1, :]
        self.w = alpha * T_excl
        self.clamped = raw > cfg.alpha_max

    def outputs(self, spl: _Compute, bg: np.ndarray):
        w = self.w
        feats = spl.feats[self.ids]
        out = np.matmul(np.swapaxes(w, 1, 2), feats).astype(np.float64)
        out[:, :, :3] += self.T_final[:, :, None] * bg[None, None, :]
        dom_l = np.argmax(w, axis=1)
        dom = np.take_along_axis(self.ids, dom_l, axis=1)
        dom = np.where(np.max(w, axis=1) > 0, spl.index[dom], -1)
        return out, dom

    def adjoint(self, spl: _Compute, bg: np.ndarray, grad_out: np.ndarray) -> dict:
        """Gradients of sum(grad_out * outputs) w.r.t. per-splat quantities in this block."""
        dt = spl.mu2d.dtype
        feats = spl.feats[self.ids]
        go = np.where(self.pvalid[:, :, None], grad_out, 0.0).astype(dt)
        bg = bg.astype(dt)
        g_feat = np.matmul(self.w, go)
        h = np.matmul(feats, np.swapaxes(go, 1, 2))
        bg_term = self.T_final * (go[:, :, :3] @ bg)
        wh = self.w * h
        # sum over later entries m > l of w_m h_m, plus the background term
        after = np.cumsum(wh[:, ::-1], axis=1)[:, ::-1] - wh + bg_term[:, None, :]
        g_alpha = self.T_excl * h - after / self.one_m
        g_raw = np.where(self.support & ~self.clamped, g_alpha, dt.type(0))
        g_opacity = np.sum(g_raw * self.g, axis=2)
        g_m = g_raw * self.raw * dt.type(-0.5)
        dx, dy = self.dx, self.dy
        g_a = np.sum(g_m * dx * dx, axis=2)
        g_b = np.sum(g_m * 2 * dx * dy, axis=2)
        g_c = np.sum(g_m * dy * dy, axis=2)
        g_u = np.sum(g_m * -2 * (self.a * dx + self.b * dy), axis=2)
        g_v = np.sum(g_m * -2 * (self.b * dx + self.c * dy), axis=2)
        return {"feat": g_feat, "opacity": g_opacity, "conic": np.stack([g_a, g_b, g_c], -1),
                "mu2d": np.stack([g_u, g_v], -1)}


def _scatter(rows: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    """Sum per-entry rows (..., k) into (n, k) by splat position, in a fixed order."""
    k = rows.shape[-1]
    flat_ids = ids.reshape(-1)
    flat = rows.reshape(-1, k)
    return np.stack([np.bincount(flat_ids, flat[:, j], n) for j in range(k)], axis=1)


def _map_blocks(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _place(frame_arrays, tiles, bins, intr, ts, out, dom):
    rgb, depth, sem, acc, dmap, T_final = frame_arrays
    ty, tx = np.divmod(tiles, bins.tiles_x)
    for j, (yy, xx) in enumerate(zip(ty, tx)):
        y0, x0 = yy * ts, xx * ts
        h = min(ts, intr.height - y0)
        w = min(ts, intr.width - x0)
        o = out[j].reshape(ts, ts, -1)[:h, :w]
        rgb[y0:y0 + h, x0:x0 + w] = o[..., :3]
        depth[y0:y0 + h, x0:x0 + w] = o[..., 3]
        sem[y0:y0 + h, x0:x0 + w] = o[..., 4]
        acc[y0:y0 + h, x0:x0 + w] = 1.0 - T_final[j].reshape(ts, ts)[:h, :w]
        dmap[y0:y0 + h, x0:x0 + w] = dom[j].reshape(ts, ts)[:h, :w]


def render(gmap: GaussianMap, intr: CameraIntrinsics, pose: Pose,
           cfg: RenderConfig = RenderConfig()) -> RenderedFrame:
    """Tile-based front-to-back compositing of color, depth and semantics."""
    spl = _project(gmap, intr, pose, cfg)
    return render_splats(spl, intr, cfg)


@dataclass
class _RenderState:
    spl: Splats
    early_stop: float
    bins: _Bins
    chunks: list
    blocks: list
    compute: _Compute


def render_splats(spl: Splats, intr: CameraIntrinsics, cfg: RenderConfig = RenderConfig(),
                  early_stop: float | None = None, keep_state: bool = False) -> RenderedFrame:
    """Composite pre-projected splats.  ``keep_state`` stores the per-block
    forward state on the frame so :func:`composite_adjoint` can reuse it."""
    bg = np.asarray(cfg.background, dtype=np.float64)
    frame = RenderedFrame.background_frame(intr.height, intr.width, bg)
    if len(spl) == 0:
        return frame
    es = cfg.early_stop if early_stop is None else early_stop
    ts = cfg.tile_size
    bins = _bin(spl, intr, ts)
    chunks = _chunks(bins, ts)
    cv = _compute_view(spl, cfg)

    def run(tiles):
        blk = _Block(cv, tiles, bins, intr, cfg, es)
        out, dom = blk.outputs(cv, bg)
        return tiles, out, dom, blk

    arrays = [frame.rgb, frame.depth, frame.semantic, frame.alpha_acc, frame.dominant]
    blocks = []
    for tiles, out, dom, blk in _map_blocks(run, chunks, cfg.workers):
        _place(arrays + [blk.T_final], tiles, bins, intr, ts, out, dom)
        if keep_state:
            blocks.append(blk)
    if keep_state:
        frame.state = _RenderState(spl, es, bins, chunks, blocks, cv)
    return frame


def composite_adjoint(spl: Splats, intr: CameraIntrinsics, cfg: RenderConfig, grad_rgb: np.ndarray,
                      grad_depth: np.ndarray, grad_sem: np.ndarray,
                      early_stop: float | None = None, state=None) -> dict:
    """Vector-Jacobian product of the tile renderer.

    Given dL/d(rgb, depth, semantic) rasters, returns per-splat gradients
    (aligned with ``spl`` arrays) w.r.t. color (n,3), z (n,), semantic (n,),
    opacity (n,), conic (n,3) and mu2d (n,2).  ``state`` is the ``.state``
    of a frame rendered from the same splats with ``keep_state=True``.
    """
    n = len(spl)
    zero = {"color": np.zeros((n, 3)), "z": np.zeros(n), "semantic": np.zeros(n),
            "opacity": np.zeros(n), "conic": np.zeros((n, 3)), "mu2d": np.zeros((n, 2))}
    if n == 0:
        return zero
    es = cfg.early_stop if early_stop is None else early_stop
    bg = np.asarray(cfg.background, dtype=np.float64)
    ts = cfg.tile_size
    if state is not None and (state.spl is not spl or state.early_stop != es):
        raise ValueError("render state does not belong to these splats")
    if state is not None:
        bins, chunks, cv = state.bins, state.chunks, state.compute
        cached = {id(c): b for c, b in zip(chunks, state.blocks)}
    else:
        bins = _bin(spl, intr, ts)
        chunks = _chunks(bins, ts)
        cv = _compute_view(spl, cfg)
        cached = {}
    G = np.concatenate([grad_rgb, grad_depth[..., None], grad_sem[..., None]], axis=-1)

    def run(tiles):
        blk = cached.get(id(tiles)) or _Block(cv, tiles, bins, intr, cfg, es)
        py = np.minimum(blk.py, intr.height - 1)
        px = np.minimum(blk.px, intr.width - 1)
        go = G[py, px]
        r = blk.adjoint(cv, bg, go)
        rows = np.concatenate([r["feat"], r["opacity"][..., None], r["conic"], r["mu2d"]], axis=-1)
        has = np.arange(blk.ids.shape[1])[None, :] < bins.count[tiles][:, None]
        rows = np.where(has[..., None], rows, 0.0)
        return _scatter(rows, blk.ids, n)

    total = np.zeros((n, 11))
    # fixed reduction order over chunks regardless of worker count
    for part in _map_blocks(run, chunks, cfg.workers):
        total += part
    return {"color": total[:, 0:3], "z": total[:, 3], "semantic": total[:, 4], "opacity": total[:, 5],
            "conic": total[:, 6:9], "mu2d": total[:, 9:11]}


def projection_adjoint(spl: Splats, intr: CameraIntrinsics, pose: Pose, g_mu2d: np.ndarray,
                       g_conic: np.ndarray, g_z: np.ndarray) -> dict:
    """Chain per-splat gradients back to world mean, scale and quaternion.

    The quaternion gradient is taken w.r.t. the normalised quaternion and
    projected onto the tangent space of the unit sphere.
    """
    fx, fy = intr.fx, intr.fy
    x, y, z = spl.p_cam[:, 0], spl.p_cam[:, 1], spl.p_cam[:, 2]
    a, b, c = (spl.conic[:, k] for k in range(3))
    Q = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    ga, gb, gc = (g_conic[:, k] for k in range(3))
    GQ = np.stack([np.stack([ga, 0.5 * gb], -1), np.stack([0.5 * gb, gc], -1)], -2)
    G_cov2 = -Q @ GQ @ Q
    J = spl.J
    G_cc = np.swapaxes(J, 1, 2) @ G_cov2 @ J
    G_J = 2.0 * G_cov2 @ J @ spl.cov_cam
    W = pose.rotation.T
    G_cov = W.T @ G_cc @ W
    M = spl.R * spl.scale[:, None, :]
    G_M = 2.0 * G_cov @ M
    g_scale = np.sum(G_M * spl.R, axis=1)
    G_R = G_M * spl.scale[:, None, :]
    g_q = np.einsum("nqij,nij->nq", quat_rotmat_jacobian(spl.quat), G_R)
    g_q -= np.sum(g_q * spl.quat, axis=1, keepdims=True) * spl.quat

    gu, gv = g_mu2d[:, 0], g_mu2d[:, 1]
    z2 = z * z
    z3 = z2 * z
    gx = gu * fx / z + G_J[:, 0, 2] * (-fx / z2)
    gy = gv * fy / z + G_J[:, 1, 2] * (-fy / z2)
    gz = (g_z - gu * fx * x / z2 - gv * fy * y / z2
          + G_J[:, 0, 0] * (-fx / z2) + G_J[:, 0, 2] * (2 * fx * x / z3)
          + G_J[:, 1, 1] * (-fy / z2) + G_J[:, 1, 2] * (2 * fy * y / z3))
    g_p = np.stack([gx, gy, gz], axis=1)
    g_mu = g_p @ pose.rotation.T
    return {"mu": g_mu, "scale": g_scale, "rotation": g_q}


def render_reference(gmap: GaussianMap, intr: CameraIntrinsics, pose: Pose,
                     cfg: RenderConfig = RenderConfig()) -> RenderedFrame:
    """Brute force: every splat over the full image, in global depth order, no early stop."""
    bg = np.asarray(cfg.background, dtype=np.float64)
    H, W = intr.height, intr.width
    frame = RenderedFrame.background_frame(H, W, bg)
    spl = _project(gmap, intr, pose, cfg)
    if len(spl) == 0:
        return frame
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    T = np.ones((H, W))
    acc = np.zeros((H, W, 5))
    best = np.zeros((H, W))
    dom = np.full((H, W), -1)
    fs2 = cfg.footprint_sigma ** 2
    for i in range(len(spl)):
        dx = uu - spl.mu2d[i, 0]
        dy = vv - spl.mu2d[i, 1]
        a, b, c = spl.conic[i]
        m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        raw = spl.opacity[i] * np.exp(-0.5 * m)
        alpha = np.where((m <= fs2) & (raw >= cfg.alpha_cull), np.minimum(raw, cfg.alpha_max), 0.0)
        w = alpha * T
        acc += w[..., None] * np.concatenate([spl.color[i], [spl.z[i], spl.semantic[i]]])
        better = w > best
        best = np.where(better, w, best)
        dom = np.where(better, spl.index[i], dom)
        T = T * (1.0 - alpha)
    frame.rgb = acc[..., :3] + T[..., None] * bg
    frame.depth = acc[..., 3]
    frame.semantic = acc[..., 4]
    frame.alpha_acc = 1.0 - T
    frame.dominant = dom
    return frame


def covariance_2d(gmap: GaussianMap, intr: CameraIntrinsics, pose: Pose, cfg: RenderConfig = RenderConfig()):
    """Convenience: (index, cov2d) for visible Gaussians, without the blur floor."""
    spl = _project(gmap, intr, pose, cfg)
    c = spl.cov2d.copy()
    c[:, 0, 0] -= cfg.blur
    c[:, 1, 1] -= cfg.blur
    return spl.index, c


__all__ = [
    "RenderConfig", "RenderedFrame", "SplattedGaussian", "Splats", "splat", "alpha_at", "render",
    "render_reference", "render_splats", "project_map", "composite_adjoint", "projection_adjoint",
    "covariance_2d", "covariance_from",
]
