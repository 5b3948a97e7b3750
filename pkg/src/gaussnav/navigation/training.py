"""Imitation training of the level scorers and the stop head.

Each training state is (node, episode): the candidates are the node's
neighbors and the label is the next hop of the shortest path to the goal,
or STOP at the goal itself.  The candidate loss is the cross-entropy of the
combined distribution p^c / 3; the stop head gets a binary cross-entropy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..optimizer.fit import Adam
from .episodes import Episode
from .mapping import SceneMaps
from .policy import LevelInputs, PolicyConfig, Scorer, build_inputs, node_features, sigmoid

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    lr: float = 1e-2
    seed: int = 0
    # label every node of the graph for each episode, not just the shortest path
    all_nodes: bool = True
    uniform_init: bool = False
    stop_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise TrainingError("steps must be non-negative")
        if self.lr <= 0:
            raise TrainingError("learning rate must be positive")


@dataclass
class Batch:
    scene: np.ndarray       # (R, SCORER_IN), one row per (state, candidate)
    view: np.ndarray
    view_empty: np.ndarray
    scene_empty: np.ndarray  # (R,) rows of states without a local map
    inst: np.ndarray        # (M, SCORER_IN)
    inst_row: np.ndarray    # (M,) candidate row, ascending
    stop: np.ndarray        # (S, STOP_IN)
    row_state: np.ndarray   # (R,) state of each candidate row, ascending
    state_start: np.ndarray  # (S,) first candidate row of each state
    target_row: np.ndarray  # (S,) labelled candidate row, -1 at goal states
    stop_label: np.ndarray  # (S,)

    @property
    def n_states(self) -> int:
        return len(self.stop)


def collect_states(maps: SceneMaps, episodes: list[Episode], cfg: PolicyConfig,
                   all_nodes: bool = True) -> list[tuple[LevelInputs, int]]:
    """(inputs, label) pairs; label is a candidate index or -1 for STOP."""
    scene = maps.scene
    g = scene.graph
    pos = g.positions
    codes = scene.codes if scene.instances else None
    nfs = {}
    out = []
    for ep in episodes:
        nodes = range(len(g)) if all_nodes else ep.gt_path
        for n in nodes:
            if n not in nfs:
                nfs[n] = node_features(maps.get(n).gmap, pos[n], codes)
            nbrs = g.neighbors(n)
            inp = build_inputs(nfs[n], pos[nbrs], pos[n], pos[ep.start], ep.instruction, cfg)
            label = -1 if n == ep.goal else nbrs.index(g.next_hop(n, ep.goal))
            out.append((inp, label))
    return out


def stack(states: list[tuple[LevelInputs, int]]) -> Batch:
    if not states:
        raise TrainingError("no training data")
    scene, view, empty, s_empty, inst, inst_row, stop = [], [], [], [], [], [], []
    row_state, state_start, target, lab = [], [], [], []
    r0 = 0
    for s, (inp, label) in enumerate(states):
        scene.append(inp.scene)
        view.append(inp.view)
        empty.append(inp.view_empty)
        s_empty.append(np.full(inp.n, inp.no_map))
        inst.append(inp.inst)
        inst_row.append(inp.inst_cand + r0)
        stop.append(inp.stop)
        row_state.append(np.full(inp.n, s))
        state_start.append(r0)
        target.append(-1 if label < 0 else r0 + label)
        lab.append(1.0 if label < 0 else 0.0)
        r0 += inp.n
    return Batch(np.concatenate(scene), np.concatenate(view), np.concatenate(empty), np.concatenate(s_empty),
                 np.concatenate(inst),
                 np.concatenate(inst_row).astype(int), np.asarray(stop), np.concatenate(row_state),
                 np.asarray(state_start), np.asarray(target), np.asarray(lab))


def _segment_softmax(z: np.ndarray, seg: np.ndarray, starts: np.ndarray) -> np.ndarray:
    zmax = np.maximum.reduceat(z, starts)[seg]
    e = np.exp(z - zmax)
    return e / np.add.reduceat(e, starts)[seg]


def _instance_logits(zi_rows: np.ndarray, inst_row: np.ndarray, R: int):
    """Per candidate row: max instance logit (0 when none) and the arg instance row (-1)."""
    z = np.zeros(R)
    arg = np.full(R, -1)
    if len(zi_rows):
        order = np.lexsort((-zi_rows, inst_row))
        first = np.ones(len(order), bool)
        first[1:] = inst_row[order[1:]] != inst_row[order[:-1]]
        win = order[first]
        z[inst_row[win]] = zi_rows[win]
        arg[inst_row[win]] = win
    return z, arg


def batch_loss(scorer: Scorer, b: Batch, stop_weight: float = 1.0, with_grad: bool = True):
    """Returns ({"ce", "bce", "total", "agreement"}, grads per module or None)."""
    R = len(b.scene)
    nets = scorer.nets
    ze_raw, h_e = nets["scene"].forward(b.scene)
    z_e = np.where(b.scene_empty, 0.0, ze_raw)
    zv_raw, h_v = nets["view"].forward(b.view)
    z_v = np.where(b.view_empty, 0.0, zv_raw)
    if len(b.inst):
        zi_rows, h_i = nets["instance"].forward(b.inst)
    else:
        zi_rows, h_i = np.zeros(0), None
    z_i, arg = _instance_logits(zi_rows, b.inst_row, R)
    ps = [_segment_softmax(z, b.row_state, b.state_start) for z in (z_e, z_v, z_i)]
    pc = ps[0] + ps[1] + ps[2]
    lab = b.target_row >= 0
    n_ce = max(int(lab.sum()), 1)
    t = b.target_row[lab]
    ce = float(-np.sum(np.log(pc[t] / 3.0)) / n_ce) if lab.any() else 0.0
    zs, h_s = scorer.stop.forward(b.stop)
    bce = float(np.mean(np.logaddexp(0.0, zs) - b.stop_label * zs))
    # agreement: argmax of p^c equals the oracle next hop (ties -> first row)
    seg_best = np.maximum.reduceat(pc, b.state_start)
    first_best = np.full(b.n_states, -1)
    cand = np.flatnonzero(pc >= seg_best[b.row_state])
    for r in cand[::-1]:
        first_best[b.row_state[r]] = r
    agree = float(np.mean(first_best[lab] == t)) if lab.any() else 1.0
    stats = {"ce": ce, "bce": bce, "total": ce + stop_weight * bce, "agreement": agree}
    if not with_grad:
        return stats, None
    gpc = np.zeros(R)
    gpc[t] = -1.0 / (pc[t] * n_ce)
    gz = []
    for p in ps:
        pg = p * gpc
        gz.append(p * gpc - p * np.add.reduceat(pg, b.state_start)[b.row_state])
    gz_e, gz_v, gz_i = gz
    gz_v = np.where(b.view_empty, 0.0, gz_v)
    gz_e = np.where(b.scene_empty, 0.0, gz_e)
    grads = {"scene": nets["scene"].backward(b.scene, h_e, gz_e),
             "view": nets["view"].backward(b.view, h_v, gz_v)}
    gi_rows = np.zeros(len(zi_rows))
    has = arg >= 0
    gi_rows[arg[has]] = gz_i[has]
    if h_i is not None:
        grads["instance"] = nets["instance"].backward(b.inst, h_i, gi_rows)
    else:
        grads["instance"] = {k: np.zeros_like(v) for k, v in nets["instance"].params().items()}
    gs = stop_weight * (sigmoid(zs) - b.stop_label) / b.n_states
    grads["stop"] = scorer.stop.backward(b.stop, h_s, gs)
    return stats, grads


def _flat(scorer: Scorer) -> dict[str, np.ndarray]:
    return {f"{m}.{k}": v for m, mod in scorer.modules().items() for k, v in mod.params().items()}


def train_on_batch(batch: Batch, cfg: TrainConfig = TrainConfig(), hidden: int = 32) -> Scorer:
    scorer = Scorer.init(cfg.seed, hidden, cfg.uniform_init)
    params = _flat(scorer)
    opt = Adam({k: cfg.lr for k in params})
    mods = scorer.modules()
    for it in range(cfg.steps):
        stats, grads = batch_loss(scorer, batch, cfg.stop_weight)
        scorer.curve.append({"step": it, **stats})
        flat_g = {f"{m}.{k}": v for m, gd in grads.items() for k, v in gd.items()}
        opt.step(params, flat_g)
        for name, arr in params.items():
            m, k = name.split(".")
            setattr(mods[m], k, arr)
    stats, _ = batch_loss(scorer, batch, cfg.stop_weight, with_grad=False)
    scorer.curve.append({"step": cfg.steps, **stats})
    log.info("scorer trained: %s", stats)
    return scorer


def train_scorer(datasets: list[tuple[SceneMaps, list[Episode]]], cfg: TrainConfig = TrainConfig(),
                 policy_cfg: PolicyConfig = PolicyConfig()) -> Scorer:
    """Fit a fresh scorer (seeded by ``cfg.seed``) on imitation states from every dataset."""
    states = []
    for maps, eps in datasets:
        states += collect_states(maps, eps, policy_cfg, cfg.all_nodes)
    if not states:
        raise TrainingError("no training data")
    return train_on_batch(stack(states), cfg, policy_cfg.hidden)
