"""Multi-level action prediction over a local Gaussian map.

Three scorers see the map at increasing granularity (the whole map, the
Gaussians inside the view cone toward a candidate, individual instance groups
inside that cone), each yielding a softmax over candidates.  The three
distributions are summed per graph node; a stop head and memory-based
backtracking complete the action space.

Positions entering any feature are expressed relative to the episode start
(odometry frame) and divided by ``PolicyConfig.length_unit``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..gaussians import GaussianMap
from ..semantics import default_tolerance, group_by_code
from .episodes import COL_GOAL, COL_OFFSET, INSTR_DIM

LEVELS = ("scene", "view", "instance")
FEAT_DIM = 7
ENC_DIM = 4
SCORER_IN = FEAT_DIM + ENC_DIM + INSTR_DIM
STOP_IN = FEAT_DIM + INSTR_DIM
STOP = -1  # action id of the stop option


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    cone_half_angle_deg: float = 60.0
    length_unit: float = 6.0
    min_instance_gaussians: int = 3
    # share of the scene-level softmax mass given to backtrack targets
    backtrack_weight: float = 0.5
    # weight of a 2-D (image feature) action score; no such branch exists here
    legacy_2d_weight: float = 0.0
    step_cap: int = 15
    # instruction rows are pooled with softmax(goal_attention * goal_flag) weights
    goal_attention: float = 4.0
    hidden: int = 32

    def __post_init__(self) -> None:
        if self.step_cap < 1:
            raise PolicyError("step cap must be >= 1")
        if not 0 < self.cone_half_angle_deg <= 180:
            raise PolicyError("cone half-angle must lie in (0, 180] degrees")
        if self.length_unit <= 0:
            raise PolicyError("length unit must be positive")
        if self.backtrack_weight < 0:
            raise PolicyError("backtrack weight must be non-negative")
        if self.legacy_2d_weight != 0.0:
            raise PolicyError("no 2-D action score branch; legacy_2d_weight must be 0")


# ----------------------------------------------------------------------------- scorer networks

@dataclass
class MLP:
    """z = w2 . tanh(W1 x + b1) + b2"""

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray  # shape (1,)

    NAMES = ("W1", "b1", "w2", "b2")

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, hidden: int, uniform: bool = False) -> "MLP":
        W1 = rng.normal(0.0, 1.0 / math.sqrt(n_in), (hidden, n_in))
        w2 = np.zeros(hidden) if uniform else rng.normal(0.0, 1.0 / math.sqrt(hidden), hidden)
        return cls(W1, np.zeros(hidden), w2, np.zeros(1))

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    def forward(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.n_in)
        h = np.tanh(X @ self.W1.T + self.b1)
        return h @ self.w2 + self.b2[0], h

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[0]

    def backward(self, X: np.ndarray, h: np.ndarray, gz: np.ndarray) -> dict:
        gh = gz[:, None] * self.w2[None, :] * (1 - h * h)
        return {"W1": gh.T @ X, "b1": gh.sum(0), "w2": h.T @ gz, "b2": np.array([gz.sum()])}

    def params(self) -> dict:
        return {k: getattr(self, k) for k in self.NAMES}

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in self.NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        m = cls(*(np.asarray(d[k], dtype=np.float64) for k in cls.NAMES))
        if m.b2.shape != (1,) or m.w2.shape != m.b1.shape or m.W1.shape[0] != m.b1.shape[0]:
            raise PolicyError("inconsistent scorer parameter shapes")
        if not all(np.all(np.isfinite(v)) for v in m.params().values()):
            raise PolicyError("scorer parameters must be finite")
        return m


@dataclass
class Scorer:
    """One network per level plus the stop head."""

    nets: dict[str, MLP]
    stop: MLP
    curve: list[dict] = field(default_factory=list)
    seed: int = 0

    @classmethod
    def init(cls, seed: int = 0, hidden: int = 32, uniform: bool = False) -> "Scorer":
        rng = np.random.default_rng(seed)
        nets = {lv: MLP.init(rng, SCORER_IN, hidden, uniform) for lv in LEVELS}
        return cls(nets, MLP.init(rng, STOP_IN, hidden, uniform), [], seed)

    def modules(self) -> dict[str, MLP]:
        return {**self.nets, "stop": self.stop}

    def copy(self) -> "Scorer":
        return Scorer.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        return {"format": "gaussnav-scorer/1", "seed": self.seed,
                "nets": {k: m.to_dict() for k, m in self.modules().items()}, "curve": self.curve}

    @classmethod
    def from_dict(cls, d: dict) -> "Scorer":
        if d.get("format") != "gaussnav-scorer/1":
            raise PolicyError("not a scorer file")
        nets = {lv: MLP.from_dict(d["nets"][lv]) for lv in LEVELS}
        stop = MLP.from_dict(d["nets"]["stop"])
        if any(m.n_in != SCORER_IN for m in nets.values()) or stop.n_in != STOP_IN:
            raise PolicyError("scorer input sizes do not match the feature layout")
        return cls(nets, stop, list(d.get("curve", [])), int(d.get("seed", 0)))

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), sort_keys=True))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Scorer":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------------------- features

def pool_instruction(X: np.ndarray, cfg: PolicyConfig) -> np.ndarray:
    """Goal-keyed attention pooling of instruction rows to one INSTR_DIM vector."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, INSTR_DIM).copy()
    X[:, COL_OFFSET] /= cfg.length_unit
    a = cfg.goal_attention * X[:, COL_GOAL]
    w = np.exp(a - a.max())
    return (w / w.sum()) @ X


def candidate_encoding(cand: np.ndarray, current: np.ndarray, start: np.ndarray, cfg: PolicyConfig) -> np.ndarray:
    cand = np.atleast_2d(cand)
    return np.concatenate([(cand - current)[:, :2], (cand - start)[:, :2]], axis=1) / cfg.length_unit


@dataclass
class NodeFeatures:
    """Per-Gaussian quantities of one local map, computed once per node."""

    feats: np.ndarray      # (N, 7) world-frame features
    azimuth: np.ndarray    # (N,) horizontal bearing from the node
    assign: np.ndarray     # (N,) codebook index or -1
    position: np.ndarray   # node position

    def local(self, start: np.ndarray, cfg: PolicyConfig, sel=None) -> np.ndarray:
        f = self.feats if sel is None else self.feats[sel]
        f = f.copy()
        f[:, :3] = (f[:, :3] - start) / cfg.length_unit
        return f

    def cone(self, target: np.ndarray, cfg: PolicyConfig) -> np.ndarray:
        d = np.asarray(target, dtype=np.float64)[:2] - self.position[:2]
        bearing = math.atan2(d[1], d[0])
        diff = np.angle(np.exp(1j * (self.azimuth - bearing)))
        return np.abs(diff) <= math.radians(cfg.cone_half_angle_deg) + 1e-12


def node_features(gmap: GaussianMap | None, position, codes) -> NodeFeatures | None:
    if gmap is None or len(gmap) == 0:
        return None
    pos = np.asarray(position, dtype=np.float64)
    feats = gmap.features()
    d = feats[:, :2] - pos[:2]
    az = np.arctan2(d[:, 1], d[:, 0])
    if codes is not None and len(codes):
        assign = group_by_code(gmap, codes, default_tolerance(len(codes))).assignment
    else:
        assign = np.full(len(gmap), -1)
    return NodeFeatures(feats, az, assign, pos)


@dataclass
class LevelInputs:
    """Scorer inputs for one decision: one row per candidate for the scene and
    view levels, one row per (candidate, instance) pair for the instance level."""

    scene: np.ndarray        # (n, SCORER_IN)
    view: np.ndarray         # (n, SCORER_IN)
    view_empty: np.ndarray   # (n,) bool, empty cone
    inst: np.ndarray         # (m, SCORER_IN)
    inst_cand: np.ndarray    # (m,) candidate index per row, ascending
    inst_code: np.ndarray    # (m,) codebook index per row
    stop: np.ndarray         # (STOP_IN,)
    n: int
    no_map: bool = False     # no local map: every level is uniform


def build_inputs(nf: NodeFeatures | None, cand_pos: np.ndarray, current: np.ndarray, start: np.ndarray,
                 X: np.ndarray, cfg: PolicyConfig) -> LevelInputs:
    cand_pos = np.asarray(cand_pos, dtype=np.float64).reshape(-1, 3)
    n = len(cand_pos)
    xp = pool_instruction(X, cfg)
    enc = candidate_encoding(cand_pos, current, start, cfg)
    tail = np.concatenate([enc, np.repeat(xp[None], n, 0)], axis=1)
    if nf is None:
        # no local map: zero features, every level flagged empty
        z = np.zeros((n, FEAT_DIM))
        rows = np.concatenate([z, tail], axis=1)
        return LevelInputs(rows, rows, np.ones(n, bool), np.zeros((0, SCORER_IN)), np.zeros(0, int),
                           np.zeros(0, int), np.concatenate([np.zeros(FEAT_DIM), xp]), n, True)
    loc = nf.local(start, cfg)
    fe = loc.mean(axis=0)
    scene_rows = np.concatenate([np.repeat(fe[None], n, 0), tail], axis=1)
    view_rows = np.zeros((n, SCORER_IN))
    empty = np.zeros(n, bool)
    inst_rows, inst_cand, inst_code = [], [], []
    for j in range(n):
        cone = nf.cone(cand_pos[j], cfg)
        if cone.any():
            view_rows[j] = np.concatenate([loc[cone].mean(axis=0), tail[j]])
        else:
            empty[j] = True
            view_rows[j] = np.concatenate([np.zeros(FEAT_DIM), tail[j]])
        a = nf.assign[cone]
        sub = loc[cone]
        for k in np.unique(a[a >= 0]):
            member = a == k
            if member.sum() < cfg.min_instance_gaussians:
                continue
            inst_rows.append(np.concatenate([sub[member].mean(axis=0), tail[j]]))
            inst_cand.append(j)
            inst_code.append(int(k))
    inst = np.asarray(inst_rows).reshape(-1, SCORER_IN)
    return LevelInputs(scene_rows, view_rows, empty, inst, np.asarray(inst_cand, dtype=int),
                       np.asarray(inst_code, dtype=int), np.concatenate([fe, xp]), n)


# ----------------------------------------------------------------------------- scoring

def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def segment_max(values: np.ndarray, seg: np.ndarray, n: int, fill: float = 0.0):
    """Per-segment max and the arg row (-1 for empty segments)."""
    out = np.full(n, fill)
    arg = np.full(n, -1)
    for r in range(len(values)):
        j = seg[r]
        if arg[j] < 0 or values[r] > out[j]:
            out[j] = values[r]
            arg[j] = r
    return out, arg


@dataclass
class LevelScores:
    p_e: np.ndarray
    p_v: np.ndarray
    p_i: np.ndarray
    z_e: np.ndarray
    z_v: np.ndarray
    z_i: np.ndarray
    inst_arg: np.ndarray   # per candidate: row of the winning instance, -1 if none


def level_logits(scorer: Scorer, inp: LevelInputs):
    z_e = np.zeros(inp.n) if inp.no_map else scorer.nets["scene"](inp.scene)
    z_v = np.where(inp.view_empty, 0.0, scorer.nets["view"](inp.view))
    zi_rows = scorer.nets["instance"](inp.inst) if len(inp.inst) else np.zeros(0)
    z_i, arg = segment_max(zi_rows, inp.inst_cand, inp.n)
    return z_e, z_v, z_i, arg, zi_rows


def level_scores_from_inputs(scorer: Scorer, inp: LevelInputs) -> LevelScores:
    if inp.n < 1:
        raise PolicyError("level scores need at least one candidate")
    z_e, z_v, z_i, arg, _ = level_logits(scorer, inp)
    return LevelScores(softmax(z_e), softmax(z_v), softmax(z_i), z_e, z_v, z_i, arg)


def level_scores(gmap: GaussianMap | None, node_position, start_position, X, cand_positions,
                 scorer: Scorer, cfg: PolicyConfig = PolicyConfig(), codes=None) -> LevelScores:
    """(p_e, p_v, p_i) over candidates for a local map built at ``node_position``."""
    nf = node_features(gmap, node_position, codes)
    inp = build_inputs(nf, cand_positions, np.asarray(node_position, float), np.asarray(start_position, float),
                       X, cfg)
    return level_scores_from_inputs(scorer, inp)


@dataclass
class ActionSpace:
    neighbors: list[int]
    positions: np.ndarray                      # (len(neighbors), 3)
    backtrack: list[int] = field(default_factory=list)
    backtrack_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stop_score: float = 0.0


@dataclass
class ActionScores:
    nodes: list[int]
    p_c: np.ndarray
    backtrack: list[int]
    backtrack_scores: np.ndarray
    stop_score: float
    action: int   # node id or STOP

    def to_dict(self) -> dict:
        return {"p_c": {str(n): float(v) for n, v in zip(self.nodes, self.p_c)},
                "backtrack": {str(n): float(v) for n, v in zip(self.backtrack, self.backtrack_scores)},
                "stop": float(self.stop_score), "action": int(self.action)}


def nearest_action(cand_positions: np.ndarray, action_nodes: list[int], action_positions: np.ndarray) -> np.ndarray:
    """Index into ``action_nodes`` of the nearest action per candidate (ties -> lower node id)."""
    order = np.argsort(np.asarray(action_nodes), kind="stable")
    ap = np.asarray(action_positions, dtype=np.float64)[order]
    d = np.linalg.norm(np.asarray(cand_positions, dtype=np.float64)[:, None, :] - ap[None, :, :], axis=2)
    return order[np.argmin(d, axis=1)]


def combine_scores(p_e, p_v, p_i, cand_positions, space: ActionSpace) -> ActionScores:
    """Sum the three level distributions on the nearest action nodes, then
    take the argmax over neighbors, backtrack targets and STOP.

    Ties go to the lowest node id; STOP wins only when strictly higher.
    """
    cand_positions = np.asarray(cand_positions, dtype=np.float64).reshape(-1, 3)
    m = nearest_action(cand_positions, space.neighbors, space.positions)
    pc = np.zeros(len(space.neighbors))
    for p in (p_e, p_v, p_i):
        np.add.at(pc, m, np.asarray(p, dtype=np.float64))
    ids = list(space.neighbors) + list(space.backtrack)
    vals = np.concatenate([pc, np.asarray(space.backtrack_scores, dtype=np.float64)])
    best_val, best = -np.inf, STOP
    for node, v in sorted(zip(ids, vals)):
        if v > best_val:
            best_val, best = v, node
    if space.stop_score > best_val:
        best = STOP
    return ActionScores(list(space.neighbors), pc, list(space.backtrack),
                        np.asarray(space.backtrack_scores, dtype=np.float64), float(space.stop_score), best)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def stop_score(scorer: Scorer, inp: LevelInputs) -> float:
    return float(3.0 * sigmoid(scorer.stop(inp.stop[None])[0]))


def backtrack_scores(scorer: Scorer, z_e_neighbors: np.ndarray, feats: np.ndarray, targets: np.ndarray,
                     current: np.ndarray, start: np.ndarray, X: np.ndarray, cfg: PolicyConfig) -> np.ndarray:
    """Scene-level logits of remembered nodes, normalised jointly with the
    neighbors' scene logits and scaled to the [0, 3] range of p^c."""
    if len(targets) == 0:
        return np.zeros(0)
    xp = pool_instruction(X, cfg)
    enc = candidate_encoding(targets, current, start, cfg)
    rows = np.concatenate([feats, enc, np.repeat(xp[None], len(targets), 0)], axis=1)
    zb = scorer.nets["scene"](rows)
    p = softmax(np.concatenate([z_e_neighbors, zb]))
    return cfg.backtrack_weight * 3.0 * p[len(z_e_neighbors):]


def ground_instance(scorer: Scorer, nf: NodeFeatures | None, current: np.ndarray, start: np.ndarray, X,
                    cfg: PolicyConfig) -> int | None:
    """Instance id (codebook index + 1) with the highest instance-level logit
    over the whole local map, or None when no group is large enough."""
    if nf is None:
        return None
    loc = nf.local(start, cfg)
    xp = pool_instruction(X, cfg)
    tail = np.concatenate([candidate_encoding(current, current, start, cfg)[0], xp])
    best, best_k = -np.inf, None
    for k in np.unique(nf.assign[nf.assign >= 0]):
        member = nf.assign == k
        if member.sum() < cfg.min_instance_gaussians:
            continue
        z = scorer.nets["instance"](np.concatenate([loc[member].mean(axis=0), tail])[None])[0]
        if z > best:
            best, best_k = z, int(k) + 1
    return best_k
