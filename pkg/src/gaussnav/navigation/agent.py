"""Episode rollout: topological memory, policies, and trajectory records."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .episodes import Episode
from .mapping import SceneMaps
from .policy import (
    FEAT_DIM, STOP, ActionScores, ActionSpace, NodeFeatures, PolicyConfig, Scorer, backtrack_scores,
    build_inputs, combine_scores, ground_instance, level_scores_from_inputs, node_features, stop_score,
)
from .scene import SyntheticScene


class MemoryError_(RuntimeError):
    """Raised when a memory invariant would be broken."""


@dataclass
class TopologicalMemory:
    current: int
    visited: dict[int, tuple[np.ndarray, int]] = field(default_factory=dict)   # node -> (feature, step)
    frontier: dict[int, np.ndarray] = field(default_factory=dict)             # node -> estimated feature

    def visit(self, node: int, feature: np.ndarray, step: int) -> None:
        self.frontier.pop(node, None)
        if node not in self.visited:
            self.visited[node] = (np.asarray(feature, dtype=np.float64), step)
        self.current = node

    def observe(self, node: int, feature: np.ndarray) -> None:
        if node not in self.visited and node not in self.frontier:
            self.frontier[node] = np.asarray(feature, dtype=np.float64)

    def feature(self, node: int) -> np.ndarray:
        if node in self.visited:
            return self.visited[node][0]
        return self.frontier[node]

    def backtrack_candidates(self, exclude) -> list[int]:
        ex = set(exclude)
        return sorted(n for n in (set(self.visited) | set(self.frontier)) if n not in ex)

    def check(self) -> None:
        if set(self.visited) & set(self.frontier):
            raise MemoryError_("visited and frontier overlap")
        if self.current not in self.visited:
            raise MemoryError_("current node is not marked visited")


@dataclass
class StepContext:
    scene: SyntheticScene
    episode: Episode
    memory: TopologicalMemory
    step: int
    maps: SceneMaps | None


@dataclass
class Decision:
    action: int
    record: dict
    grounded: int | None = None


class OraclePolicy:
    name = "oracle"

    def decide(self, ctx: StepContext) -> Decision:
        cur = ctx.memory.current
        ctx.memory.visit(cur, np.zeros(FEAT_DIM), ctx.step)
        if cur == ctx.episode.goal:
            return Decision(STOP, {"action": STOP}, ctx.episode.target_instance)
        nxt = ctx.scene.graph.next_hop(cur, ctx.episode.goal)
        return Decision(nxt, {"action": nxt})


class RandomPolicy:
    """Uniform over neighbors and STOP."""

    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def decide(self, ctx: StepContext) -> Decision:
        cur = ctx.memory.current
        ctx.memory.visit(cur, np.zeros(FEAT_DIM), ctx.step)
        rng = np.random.default_rng([self.seed, zlib.crc32(ctx.episode.id.encode()), ctx.step])
        options = ctx.scene.graph.neighbors(cur) + [STOP]
        a = int(options[rng.integers(len(options))])
        return Decision(a, {"action": a})


class MapPolicy:
    """Multi-level action prediction with memory-based backtracking."""

    name = "map"

    def __init__(self, scorer: Scorer, cfg: PolicyConfig = PolicyConfig(), codes=None):
        self.scorer = scorer
        self.cfg = cfg
        self.codes = None if codes is None else np.asarray(codes, dtype=np.float64)
        self._nf: dict[tuple[int, int], NodeFeatures | None] = {}

    def features_at(self, maps: SceneMaps, node: int) -> NodeFeatures | None:
        key = (id(maps), node)
        if key not in self._nf:
            nm = maps.get(node)
            self._nf[key] = node_features(nm.gmap, maps.scene.graph.positions[node], self.codes)
        return self._nf[key]

    def decide(self, ctx: StepContext) -> Decision:
        g = ctx.scene.graph
        mem = ctx.memory
        cur = mem.current
        pos = g.positions
        start = pos[ctx.episode.start]
        X = ctx.episode.instruction
        nf = self.features_at(ctx.maps, cur)
        nbrs = g.neighbors(cur)
        inp = build_inputs(nf, pos[nbrs], pos[cur], start, X, self.cfg)
        ls = level_scores_from_inputs(self.scorer, inp)

        mem.visit(cur, inp.stop[:FEAT_DIM], ctx.step)
        for j, n in enumerate(nbrs):
            est = inp.view[j, :FEAT_DIM] if not inp.view_empty[j] else inp.stop[:FEAT_DIM]
            mem.observe(n, est)
        mem.check()

        bt = mem.backtrack_candidates([cur] + nbrs) if self.cfg.backtrack_weight > 0 else []
        bt_feats = np.array([mem.feature(n) for n in bt]).reshape(-1, FEAT_DIM)
        bts = backtrack_scores(self.scorer, ls.z_e, bt_feats, pos[bt].reshape(-1, 3), pos[cur], start, X,
                               self.cfg)
        space = ActionSpace(nbrs, pos[nbrs], bt, bts, stop_score(self.scorer, inp))
        sc: ActionScores = combine_scores(ls.p_e, ls.p_v, ls.p_i, pos[nbrs], space)
        rec = {"p_e": ls.p_e.tolist(), "p_v": ls.p_v.tolist(), "p_i": ls.p_i.tolist(), **sc.to_dict()}
        grounded = None
        if sc.action == STOP:
            grounded = ground_instance(self.scorer, nf, pos[cur], start, X, self.cfg)
        return Decision(sc.action, rec, grounded)


@dataclass
class TrajectoryRecord:
    episode_id: str
    policy: str
    nodes: list[int]
    steps: list[dict]
    stop_step: int | None
    grounded_instance: int | None
    terminated_by_cap: bool

    def to_dict(self) -> dict:
        return {"episode_id": self.episode_id, "policy": self.policy, "nodes": list(self.nodes),
                "steps": self.steps, "stop_step": self.stop_step, "grounded_instance": self.grounded_instance,
                "terminated_by_cap": self.terminated_by_cap}

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryRecord":
        return cls(str(d["episode_id"]), d.get("policy", ""), [int(n) for n in d["nodes"]], d.get("steps", []),
                   d.get("stop_step"), d.get("grounded_instance"), bool(d.get("terminated_by_cap", False)))


def run_episode(scene: SyntheticScene, episode: Episode, policy, maps: SceneMaps | None = None,
                cfg: PolicyConfig = PolicyConfig()) -> TrajectoryRecord:
    """Act until STOP or until ``cfg.step_cap`` hops have been travelled."""
    g = scene.graph
    mem = TopologicalMemory(episode.start)
    path = [episode.start]
    steps: list[dict] = []
    hops = 0
    step = 0
    while True:
        cur = path[-1]
        mem.current = cur
        d = policy.decide(StepContext(scene, episode, mem, step, maps))
        steps.append({"step": step, "node": cur, **d.record})
        if d.action == STOP:
            return TrajectoryRecord(episode.id, policy.name, path, steps, step, d.grounded, False)
        if g.has_edge(cur, d.action):
            leg = [cur, d.action]
        else:
            if d.action not in mem.visited and d.action not in mem.frontier:
                raise MemoryError_(f"backtrack target {d.action} is neither visited nor frontier")
            leg = g.shortest_path(cur, d.action, allowed=set(mem.visited) | {d.action})
        for n in leg[1:]:
            path.append(n)
            hops += 1
            if hops >= cfg.step_cap:
                return TrajectoryRecord(episode.id, policy.name, path, steps, None, None, True)
        step += 1


def save_trajectories(records: list[TrajectoryRecord], path) -> None:
    path = Path(path)
    doc = json.dumps({"trajectories": [r.to_dict() for r in records]}, indent=1, sort_keys=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(doc)
    tmp.replace(path)


def load_trajectories(path) -> list[TrajectoryRecord]:
    d = json.loads(Path(path).read_text())
    return [TrajectoryRecord.from_dict(r) for r in d["trajectories"]]
