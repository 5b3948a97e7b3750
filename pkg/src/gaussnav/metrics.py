"""Trajectory and grounding metrics for graph navigation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .navigation.agent import TrajectoryRecord
from .navigation.episodes import Episode
from .navigation.scene import NavGraph

METRIC_KEYS = ("TL", "NE", "SR", "OSR", "SPL", "nDTW", "SDTW", "CLS", "RGS", "RGSPL")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsConfig:
    d_th: float = 3.0
    distance: str = "geodesic"   # or "euclidean"

    def __post_init__(self) -> None:
        if not self.d_th > 0:
            raise MetricsError("success threshold d_th must be positive")
        if self.distance not in ("geodesic", "euclidean"):
            raise MetricsError(f"unknown distance mode {self.distance!r}")


def _dist(graph: NavGraph, a: int, b: int, cfg: MetricsConfig) -> float:
    if cfg.distance == "geodesic":
        return graph.geodesic(a, b)
    return float(np.linalg.norm(graph.positions[a] - graph.positions[b]))


def check_walk(graph: NavGraph, nodes: list[int], start: int | None = None) -> None:
    if not nodes:
        raise MetricsError("trajectory is empty")
    if start is not None and nodes[0] != start:
        raise MetricsError(f"trajectory starts at {nodes[0]}, episode starts at {start}")
    for a, b in zip(nodes[:-1], nodes[1:]):
        if not (0 <= a < len(graph) and 0 <= b < len(graph)) or not graph.has_edge(a, b):
            raise MetricsError(f"trajectory step {a} -> {b} is not a graph edge")


def basic_metrics(nodes: list[int], episode: Episode, graph: NavGraph, cfg: MetricsConfig = MetricsConfig()) -> dict:
    check_walk(graph, nodes, episode.start)
    tl = graph.path_length(nodes)
    ne = _dist(graph, nodes[-1], episode.goal, cfg)
    sr = 1.0 if ne <= cfg.d_th else 0.0
    osr = 1.0 if any(_dist(graph, n, episode.goal, cfg) <= cfg.d_th for n in nodes) else 0.0
    ell = graph.geodesic(episode.start, episode.goal)
    spl = sr * ell / max(tl, ell)
    return {"TL": tl, "NE": ne, "SR": sr, "OSR": osr, "SPL": spl}


def dtw(P: np.ndarray, R: np.ndarray) -> float:
    """DTW cost with Euclidean point distances and steps (1,0), (0,1), (1,1)."""
    if len(P) == 0 or len(R) == 0:
        raise MetricsError("DTW needs nonempty sequences")
    P = np.asarray(P, dtype=np.float64).reshape(len(P), -1)
    R = np.asarray(R, dtype=np.float64).reshape(len(R), -1)
    d = np.linalg.norm(P[:, None, :] - R[None, :, :], axis=2)
    n, m = d.shape
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = d[i - 1, j - 1] + min(D[i - 1, j], D[i, j - 1], D[i - 1, j - 1])
    return float(D[n, m])


def dtw_bruteforce(P: np.ndarray, R: np.ndarray) -> float:
    """Minimum cost over every monotone alignment, by explicit enumeration."""
    if len(P) == 0 or len(R) == 0:
        raise MetricsError("DTW needs nonempty sequences")
    P = np.asarray(P, dtype=np.float64).reshape(len(P), -1)
    R = np.asarray(R, dtype=np.float64).reshape(len(R), -1)
    d = np.linalg.norm(P[:, None, :] - R[None, :, :], axis=2)
    n, m = d.shape
    best = math.inf
    stack = [(0, 0, d[0, 0])]
    while stack:
        i, j, c = stack.pop()
        if i == n - 1 and j == m - 1:
            best = min(best, c)
            continue
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                stack.append((a, b, c + d[a, b]))
    return float(best)


def ndtw(P, R, d_th: float) -> float:
    if not d_th > 0:
        raise MetricsError("d_th must be positive")
    return math.exp(-dtw(P, R) / (len(R) * d_th))


def coverage(P, R, d_th: float) -> float:
    P = np.asarray(P, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    d = np.linalg.norm(R[:, None, :] - P[None, :, :], axis=2).min(axis=1)
    return float(np.mean(np.exp(-d / d_th)))


def cls_score(P, R, path_length: float, ref_length: float, d_th: float) -> float:
    """Coverage times a length score: PC * EPL / (EPL + |EPL - PL|), EPL = PC * |R|."""
    pc = coverage(P, R, d_th)
    epl = pc * ref_length
    if epl + abs(epl - path_length) == 0:
        return 0.0
    return pc * epl / (epl + abs(epl - path_length))


def grounding_metrics(sr: float, grounded: int | None, episode: Episode, tl: float, ell: float):
    """(RGS, RGSPL), or None when the episode has no target instance."""
    if episode.target_instance is None:
        return None
    rgs = 1.0 if sr == 1.0 and grounded == episode.target_instance else 0.0
    return rgs, rgs * ell / max(tl, ell)


def episode_metrics(traj: TrajectoryRecord, episode: Episode, graph: NavGraph,
                    cfg: MetricsConfig = MetricsConfig()) -> dict:
    m = basic_metrics(traj.nodes, episode, graph, cfg)
    P = graph.positions[traj.nodes]
    R = graph.positions[episode.gt_path]
    m["nDTW"] = ndtw(P, R, cfg.d_th)
    m["SDTW"] = m["SR"] * m["nDTW"]
    m["CLS"] = cls_score(P, R, m["TL"], graph.path_length(episode.gt_path), cfg.d_th)
    ell = graph.geodesic(episode.start, episode.goal)
    g = grounding_metrics(m["SR"], traj.grounded_instance, episode, m["TL"], ell)
    m["RGS"], m["RGSPL"] = (None, None) if g is None else g
    return m


def check_bounds(m: dict, tol: float = 1e-12) -> None:
    for k in ("SR", "OSR", "SPL", "nDTW", "SDTW", "CLS", "RGS", "RGSPL"):
        v = m.get(k)
        if v is not None and not -tol <= v <= 1 + tol:
            raise MetricsError(f"{k}={v} outside [0, 1]")
    if m["SPL"] > m["SR"] + tol or m["SDTW"] > min(m["SR"], m["nDTW"]) + tol:
        raise MetricsError("SPL <= SR or SDTW <= min(SR, nDTW) violated")
    if m.get("RGS") is not None and (m["RGSPL"] > m["RGS"] + tol or m["RGS"] > m["SR"] + tol):
        raise MetricsError("RGSPL <= RGS <= SR violated")
    if m["TL"] < 0 or m["NE"] < 0:
        raise MetricsError("negative length")


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)   # per episode, with "episode_id"

    @property
    def aggregate(self) -> dict:
        out = {"episodes": len(self.rows)}
        for k in METRIC_KEYS:
            vals = [r[k] for r in self.rows if r.get(k) is not None]
            out[k] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        return {"aggregate": self.aggregate, "episodes": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_table(self) -> str:
        cols = ["episode_id", *METRIC_KEYS]
        fmt = lambda v: "-" if v is None else (f"{v:.3f}" if isinstance(v, float) else str(v))  # noqa: E731
        body = [[fmt(r.get(c)) for c in cols] for r in self.rows]
        agg = self.aggregate
        body.append(["mean", *[fmt(agg[k]) for k in METRIC_KEYS]])
        widths = [max(len(c), *(len(row[i]) for row in body)) for i, c in enumerate(cols)]
        line = lambda row: "  ".join(v.rjust(w) for v, w in zip(row, widths))  # noqa: E731
        return "\n".join([line(cols), line(["-" * w for w in widths]), *map(line, body)])


def evaluate_trajectories(trajs: list[TrajectoryRecord], episodes: list[Episode], graph: NavGraph,
                          cfg: MetricsConfig = MetricsConfig()) -> MetricsReport:
    by_id = {e.id: e for e in episodes}
    rows = []
    for t in trajs:
        if t.episode_id not in by_id:
            raise MetricsError(f"trajectory refers to unknown episode {t.episode_id!r}")
        m = episode_metrics(t, by_id[t.episode_id], graph, cfg)
        check_bounds(m)
        rows.append({"episode_id": t.episode_id, **m})
    return MetricsReport(rows)
