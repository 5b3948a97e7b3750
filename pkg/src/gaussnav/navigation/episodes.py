"""Navigation episodes with synthetic instruction embeddings."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import SyntheticScene

INSTR_DIM = 16
# column layout of an instruction row
COL_CODE, COL_OFFSET, COL_GOAL = 0, slice(1, 4), 4


class EpisodeError(ValueError):
    pass


@dataclass
class Episode:
    id: str
    scene_path: str
    start: int
    goal: int
    instruction: np.ndarray           # (L, INSTR_DIM)
    gt_path: list[int]
    target_instance: int | None = None

    def __post_init__(self) -> None:
        self.instruction = np.asarray(self.instruction, dtype=np.float64).reshape(-1, INSTR_DIM)
        if self.start == self.goal:
            raise EpisodeError(f"episode {self.id}: start equals goal")
        if not self.gt_path or self.gt_path[0] != self.start or self.gt_path[-1] != self.goal:
            raise EpisodeError(f"episode {self.id}: ground-truth path must run from start to goal")
        if len(self.instruction) == 0:
            raise EpisodeError(f"episode {self.id}: empty instruction")

    def to_dict(self) -> dict:
        return {"id": self.id, "scene_path": self.scene_path, "start": self.start, "goal": self.goal,
                "target_instance": self.target_instance, "instruction": self.instruction.tolist(),
                "gt_path": list(self.gt_path)}

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        ti = d.get("target_instance")
        return cls(str(d["id"]), d.get("scene_path", ""), int(d["start"]), int(d["goal"]),
                   np.asarray(d["instruction"], dtype=np.float64), [int(n) for n in d["gt_path"]],
                   None if ti is None else int(ti))


@dataclass(frozen=True)
class EpisodeConfig:
    count: int = 10
    min_geodesic: float = 5.0

    def __post_init__(self) -> None:
        if self.count < 0:
            raise EpisodeError("episode count must be non-negative")


def goal_node_for(scene: SyntheticScene, instance_id: int) -> int:
    """Node of the instance's room closest to the instance centroid (ties -> lower id)."""
    inst = scene.instance(instance_id)
    nodes = [n for n in range(len(scene.graph)) if scene.node_room[n] == inst.room]
    d = np.linalg.norm(scene.graph.positions[nodes, :2] - inst.centroid[:2], axis=1)
    return nodes[int(np.argmin(d))]


def is_door(scene: SyntheticScene, node: int) -> bool:
    return node >= 5 * scene.cfg.n_rooms


def instruction_rows(scene: SyntheticScene, path: list[int], target: int | None) -> np.ndarray:
    """One row per room traversed (doors skipped): its first instance code, its
    centroid relative to the start, and a goal flag on the final row."""
    start = scene.graph.positions[path[0]]
    rooms = []
    for n in path:
        if is_door(scene, n):
            continue
        r = scene.node_room[n]
        if not rooms or rooms[-1] != r:
            rooms.append(r)
    goal_room = scene.node_room[path[-1]]
    if rooms[-1] != goal_room:
        rooms.append(goal_room)
    rows = np.zeros((len(rooms), INSTR_DIM))
    for i, r in enumerate(rooms):
        insts = [x for x in scene.instances if x.room == r]
        last = i == len(rooms) - 1
        if last and target is not None:
            code = scene.instance(target).code
        else:
            code = insts[0].code if insts else 0.0
        rows[i, COL_CODE] = code
        rows[i, COL_OFFSET] = scene.room_centers[r] - start
        rows[i, COL_GOAL] = 1.0 if last else 0.0
    return rows


def make_episodes(scene: SyntheticScene, seed: int, cfg: EpisodeConfig = EpisodeConfig(),
                  scene_path: str = "") -> list[Episode]:
    """Target an instance, pick a start at least ``min_geodesic`` away, and
    record the shortest path.  Deterministic in ``seed``."""
    if not scene.instances:
        raise EpisodeError("scene has no instances to target")
    rng = np.random.default_rng(seed)
    dist = scene.graph.distances()
    out = []
    for e in range(cfg.count):
        target = int(rng.integers(1, len(scene.instances) + 1))
        goal = goal_node_for(scene, target)
        far = np.flatnonzero(dist[:, goal] >= cfg.min_geodesic)
        if far.size == 0:
            far = np.flatnonzero(np.arange(len(scene.graph)) != goal)
        start = int(rng.choice(far))
        path = scene.graph.shortest_path(start, goal)
        out.append(Episode(f"s{scene.seed}-e{e}", scene_path, start, goal,
                           instruction_rows(scene, path, target), path, target))
    return out


def save_episodes(episodes: list[Episode], path) -> None:
    path = Path(path)
    doc = json.dumps({"episodes": [e.to_dict() for e in episodes]}, indent=1, sort_keys=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(doc)
    tmp.replace(path)


def load_episodes(path) -> list[Episode]:
    d = json.loads(Path(path).read_text())
    if "episodes" not in d:
        raise EpisodeError(f"{path}: missing 'episodes' list")
    return [Episode.from_dict(e) for e in d["episodes"]]

