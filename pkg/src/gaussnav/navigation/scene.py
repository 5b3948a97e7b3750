"""Synthetic indoor worlds: a grid of rooms built from Gaussian slabs, object
instances as colored Gaussian clusters, and a navigable graph of viewpoints."""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from ..gaussians import GaussianMap, load_map, save_map
from ..semantics import codebook


class SceneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    rows: int = 2
    cols: int = 2
    instances_per_room: int = 1
    gaussians_per_instance: int = 80
    room_size: float = 6.0
    wall_height: float = 2.6
    door_width: float = 1.4
    door_height: float = 2.1
    slab_spacing: float = 0.25
    camera_height: float = 1.4
    wall_opacity: float = 0.9
    instance_opacity: float = 0.95

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise SceneConfigError(f"need at least one room, got {self.rows}x{self.cols}")
        if self.instances_per_room < 0:
            raise SceneConfigError("instance count must be non-negative")
        if self.gaussians_per_instance < 1:
            raise SceneConfigError("instances need at least one Gaussian")
        if self.door_width >= self.room_size or self.door_height > self.wall_height:
            raise SceneConfigError("door does not fit in the wall")

    @property
    def n_rooms(self) -> int:
        return self.rows * self.cols

    @property
    def instances(self) -> int:
        return self.rows * self.cols * self.instances_per_room


class NavGraph:
    """Undirected viewpoint graph; edge length is the Euclidean distance."""

    def __init__(self, positions, edges):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.g = nx.Graph()
        for i in range(len(self.positions)):
            self.g.add_node(i)
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"self-loop at node {a}")
            length = float(np.linalg.norm(self.positions[a] - self.positions[b]))
            if length <= 0:
                raise ValueError(f"edge {a}-{b} has zero length")
            self.g.add_edge(a, b, weight=length)
        if len(self.positions) and not nx.is_connected(self.g):
            raise ValueError("navigation graph is not connected")
        self._dist = None

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return sorted((min(a, b), max(a, b)) for a, b in self.g.edges())

    def neighbors(self, n: int) -> list[int]:
        return sorted(self.g.neighbors(n))

    def has_edge(self, a: int, b: int) -> bool:
        return self.g.has_edge(a, b)

    def edge_length(self, a: int, b: int) -> float:
        return self.g[a][b]["weight"]

    def distances(self) -> np.ndarray:
        """All-pairs geodesic distances (meters)."""
        if self._dist is None:
            n = len(self)
            d = np.full((n, n), np.inf)
            for src, lengths in nx.all_pairs_dijkstra_path_length(self.g):
                for dst, v in lengths.items():
                    d[src, dst] = v
            self._dist = d
        return self._dist

    def geodesic(self, a: int, b: int) -> float:
        return float(self.distances()[a, b])

    def shortest_path(self, a: int, b: int, allowed: set[int] | None = None) -> list[int]:
        """Shortest path; ties resolved towards lower node ids at every hop."""
        g = self.g if allowed is None else self.g.subgraph(allowed)
        dist = nx.single_source_dijkstra_path_length(g, b)
        if a not in dist:
            raise nx.NetworkXNoPath(f"no path {a} -> {b}")
        path = [a]
        while path[-1] != b:
            cur = path[-1]
            best = min((n for n in sorted(g.neighbors(cur)) if n in dist),
                       key=lambda n: (round(g[cur][n]["weight"] + dist[n], 9), n))
            path.append(best)
        return path

    def next_hop(self, a: int, b: int) -> int:
        return self.shortest_path(a, b)[1]

    def path_length(self, path) -> float:
        return float(sum(self.edge_length(a, b) for a, b in zip(path[:-1], path[1:])))

    def to_dict(self) -> dict:
        return {"nodes": [{"id": i, "position": p.tolist()} for i, p in enumerate(self.positions)],
                "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, d: dict) -> "NavGraph":
        nodes = sorted(d["nodes"], key=lambda n: n["id"])
        if [n["id"] for n in nodes] != list(range(len(nodes))):
            raise ValueError("node ids must be 0..n-1")
        return cls([n["position"] for n in nodes], d["edges"])


@dataclass
class Instance:
    id: int                 # 1-based; 0 is reserved for "stuff"/unlabeled
    label: str
    code: float
    room: int
    centroid: np.ndarray
    indices: np.ndarray

    def to_dict(self) -> dict:
        return {"id": self.id, "label": self.label, "code": self.code, "room": self.room,
                "centroid": [float(v) for v in self.centroid], "indices": [int(i) for i in self.indices]}

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        return cls(int(d["id"]), d["label"], float(d["code"]), int(d["room"]),
                   np.asarray(d["centroid"], dtype=np.float64), np.asarray(d["indices"], dtype=np.int64))


@dataclass
class SyntheticScene:
    gmap: GaussianMap
    instances: list[Instance]
    graph: NavGraph
    node_room: list[int]
    room_centers: np.ndarray
    cfg: SceneConfig = field(default_factory=SceneConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        self.gaussian_instance = np.zeros(len(self.gmap), dtype=np.int64)
        for inst in self.instances:
            self.gaussian_instance[inst.indices] = inst.id

    @property
    def codes(self) -> np.ndarray:
        return np.array([inst.code for inst in self.instances])

    def instance(self, iid: int) -> Instance:
        return self.instances[iid - 1]

    def to_dict(self, map_path: str) -> dict:
        return {
            "gaussian_map_path": map_path,
            "seed": self.seed,
            "config": {k: getattr(self.cfg, k) for k in self.cfg.__dataclass_fields__},
            "instances": [inst.to_dict() for inst in self.instances],
            "graph": self.graph.to_dict(),
            "rooms": {"centers": self.room_centers.tolist(), "node_room": list(self.node_room)},
        }


def save_scene(scene: SyntheticScene, path) -> None:
    """Write ``path`` (JSON) plus the map next to it as ``<stem>.g3dm``."""
    path = Path(path)
    map_path = path.with_suffix(".g3dm")
    save_map(scene.gmap, map_path)
    doc = json.dumps(scene.to_dict(map_path.name), indent=1, sort_keys=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(doc)
    tmp.replace(path)


def load_scene(path) -> SyntheticScene:
    path = Path(path)
    d = json.loads(path.read_text())
    gmap = load_map(path.parent / d["gaussian_map_path"])
    cfg = SceneConfig(**d.get("config", {}))
    return SyntheticScene(gmap, [Instance.from_dict(i) for i in d["instances"]], NavGraph.from_dict(d["graph"]),
                          list(d["rooms"]["node_room"]), np.asarray(d["rooms"]["centers"], dtype=np.float64),
                          cfg, int(d.get("seed", 0)))


# ----------------------------------------------------------------------------- generation

class _Builder:
    def __init__(self):
        self.parts: dict[str, list] = {k: [] for k in ("mu", "scale", "rotation", "opacity", "color", "semantic")}

    def add(self, mu, scale, color, opacity, rotation=None, semantic=0.0) -> np.ndarray:
        n = len(mu)
        start = sum(len(a) for a in self.parts["mu"])
        if rotation is None:
            rotation = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        self.parts["mu"].append(np.asarray(mu, dtype=np.float64))
        self.parts["scale"].append(np.broadcast_to(scale, (n, 3)).astype(np.float64))
        self.parts["rotation"].append(np.asarray(rotation, dtype=np.float64))
        self.parts["opacity"].append(np.full(n, opacity))
        self.parts["color"].append(np.clip(color, 0.0, 1.0))
        self.parts["semantic"].append(np.full(n, semantic))
        return np.arange(start, start + n)

    def build(self) -> GaussianMap:
        return GaussianMap(*(np.concatenate(self.parts[k]).astype(np.float32) for k in
                             ("mu", "scale", "rotation", "opacity", "color", "semantic")))


def _room_palette(n: int, rng) -> np.ndarray:
    hues = (np.arange(n) / max(n, 1) + rng.uniform(0, 1)) % 1.0
    return np.array([colorsys.hsv_to_rgb(h, 0.25, 0.8) for h in hues])


def _wall(b: _Builder, p0, p1, cfg: SceneConfig, color, rng, door_at: float | None, normal_offset=0.0):
    """Gaussian slab on the vertical segment p0 -> p1, optionally with a door opening."""
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    length = np.linalg.norm(p1 - p0)
    along = (p1 - p0) / length
    normal = np.array([-along[1], along[0]])
    sp = cfg.slab_spacing
    ts = np.arange(sp / 2, length, sp)
    zs = np.arange(sp / 2, cfg.wall_height, sp)
    T, Z = np.meshgrid(ts, zs, indexing="ij")
    T, Z = T.ravel(), Z.ravel()
    if door_at is not None:
        keep = ~((np.abs(T - door_at) < cfg.door_width / 2) & (Z < cfg.door_height))
        T, Z = T[keep], Z[keep]
    xy = p0[None, :] + T[:, None] * along[None, :] + normal_offset * normal[None, :]
    mu = np.column_stack([xy, Z])
    thin = 0.02
    if abs(along[0]) > abs(along[1]):
        scale = np.array([0.6 * sp, thin, 0.6 * sp])
    else:
        scale = np.array([thin, 0.6 * sp, 0.6 * sp])
    stripes = 0.85 + 0.15 * np.cos(2 * math.pi * T / 1.0)
    col = color[None, :] * stripes[:, None] + rng.normal(0, 0.02, (len(T), 3))
    b.add(mu, scale, col, cfg.wall_opacity)


def _floor(b: _Builder, x0, y0, size, cfg: SceneConfig, tones, rng):
    sp = cfg.slab_spacing
    g = np.arange(sp / 2, size, sp)
    X, Y = np.meshgrid(x0 + g, y0 + g, indexing="ij")
    X, Y = X.ravel(), Y.ravel()
    checker = ((np.floor(X) + np.floor(Y)) % 2).astype(int)
    col = tones[checker] + rng.normal(0, 0.02, (len(X), 3))
    b.add(np.column_stack([X, Y, np.zeros_like(X)]), np.array([0.6 * sp, 0.6 * sp, 0.02]), col, cfg.wall_opacity)


def _random_quats(n: int, rng) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def generate_scene(seed: int = 0, cfg: SceneConfig = SceneConfig()) -> SyntheticScene:
    """Deterministic synthetic world for ``seed``.

    Rooms form a ``rows x cols`` grid; adjacent rooms share a wall with a
    door.  Each room has a viewpoint at its center and four at its inner
    corners; every door holds one viewpoint linked to the three nearest
    viewpoints on either side.
    """
    rng = np.random.default_rng(seed)
    S = cfg.room_size
    b = _Builder()
    wall_cols = _room_palette(cfg.n_rooms, rng)
    tones = np.array([[0.55, 0.45, 0.35], [0.35, 0.3, 0.25]]) + rng.uniform(-0.05, 0.05, (2, 3))
    room_id = lambda r, c: r * cfg.cols + c  # noqa: E731
    centers = np.array([[(c + 0.5) * S, (r + 0.5) * S, 0.0] for r in range(cfg.rows) for c in range(cfg.cols)])

    for r in range(cfg.rows):
        for c in range(cfg.cols):
            _floor(b, c * S, r * S, S, cfg, tones, rng)
    half = 0.04
    # walls of constant x (between columns)
    for c in range(cfg.cols + 1):
        for r in range(cfg.rows):
            p0, p1 = (c * S, r * S), (c * S, (r + 1) * S)
            if c in (0, cfg.cols):
                inside = room_id(r, 0 if c == 0 else cfg.cols - 1)
                _wall(b, p0, p1, cfg, wall_cols[inside], rng, None)
            else:
                # normal of a +y segment points to -x
                _wall(b, p0, p1, cfg, wall_cols[room_id(r, c - 1)], rng, S / 2, normal_offset=half)
                _wall(b, p0, p1, cfg, wall_cols[room_id(r, c)], rng, S / 2, normal_offset=-half)
    # walls of constant y (between rows)
    for r in range(cfg.rows + 1):
        for c in range(cfg.cols):
            p0, p1 = (c * S, r * S), ((c + 1) * S, r * S)
            if r in (0, cfg.rows):
                inside = room_id(0 if r == 0 else cfg.rows - 1, c)
                _wall(b, p0, p1, cfg, wall_cols[inside], rng, None)
            else:
                # normal of a +x segment points to +y
                _wall(b, p0, p1, cfg, wall_cols[room_id(r - 1, c)], rng, S / 2, normal_offset=-half)
                _wall(b, p0, p1, cfg, wall_cols[room_id(r, c)], rng, S / 2, normal_offset=half)

    # viewpoints: room center plus four inner corners per room, then one per door
    positions, node_room, edges = [], [], []
    q = S / 4
    room_nodes = {}
    for rid, ctr in enumerate(centers):
        ids = [len(positions)]
        positions.append([ctr[0], ctr[1], 0.0])
        node_room.append(rid)
        for dy in (-q, q):
            for dx in (-q, q):
                ids.append(len(positions))
                positions.append([ctr[0] + dx, ctr[1] + dy, 0.0])
                node_room.append(rid)
        room_nodes[rid] = ids
        c0, a, b_, c_, d_ = ids
        edges += [(c0, a), (c0, b_), (c0, c_), (c0, d_), (a, b_), (c_, d_), (a, c_), (b_, d_)]
    for r in range(cfg.rows):
        for c in range(cfg.cols):
            for (r2, c2) in ((r, c + 1), (r + 1, c)):
                if r2 >= cfg.rows or c2 >= cfg.cols:
                    continue
                ra, rb = room_id(r, c), room_id(r2, c2)
                door = (centers[ra] + centers[rb]) / 2
                did = len(positions)
                positions.append(door.tolist())
                node_room.append(ra)
                pa = np.asarray(positions)
                for rid in (ra, rb):
                    ids = room_nodes[rid]
                    d = np.linalg.norm(pa[ids] - door, axis=1)
                    for k in np.argsort(d, kind="stable")[:3]:
                        edges.append((ids[k], did))
    graph = NavGraph(positions, edges)
    node_pos = graph.positions

    # instances
    codes = codebook(cfg.instances) if cfg.instances else np.zeros(0)
    hues = (np.arange(cfg.instances) / max(cfg.instances, 1) + rng.uniform(0, 1)) % 1.0
    instances = []
    placed = []
    margin = 0.8
    for i in range(cfg.instances):
        rid = i % cfg.n_rooms
        ctr = centers[rid]
        for _ in range(200):
            pos = ctr[:2] + rng.uniform(-S / 2 + margin, S / 2 - margin, 2)
            if np.min(np.linalg.norm(node_pos[:, :2] - pos, axis=1)) < 1.0:
                continue
            if placed and min(np.linalg.norm(np.asarray(placed) - pos, axis=1)) < 1.2:
                continue
            break
        placed.append(pos)
        w, d = rng.uniform(0.5, 0.9, 2)
        h = rng.uniform(0.6, 1.3)
        n = cfg.gaussians_per_instance
        local = rng.uniform(-0.5, 0.5, (n, 3)) * np.array([w, d, h]) + np.array([0.0, 0.0, h / 2])
        mu = local + np.array([pos[0], pos[1], 0.0])
        sp = (w * d * h / n) ** (1 / 3)
        base = np.array(colorsys.hsv_to_rgb(hues[i], 0.75, 0.85))
        col = base[None, :] * (0.9 + 0.1 * np.cos(6 * local[:, 2:3])) + rng.normal(0, 0.02, (n, 3))
        scale = rng.uniform(0.5, 0.8, (n, 3)) * sp
        idx = b.add(mu, scale, col, cfg.instance_opacity, _random_quats(n, rng), semantic=codes[i])
        instances.append(Instance(i + 1, f"object_{i + 1}", float(codes[i]), rid, mu.mean(axis=0), idx))

    gmap = b.build()
    gmap.meta["source"] = f"synthetic seed={seed}"
    return SyntheticScene(gmap, instances, graph, node_room, centers, cfg, seed)
