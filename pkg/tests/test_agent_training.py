import numpy as np
import pytest

from gaussnav.metrics import basic_metrics
from gaussnav.navigation.agent import (
    MapPolicy, MemoryError_, OraclePolicy, RandomPolicy, TopologicalMemory, load_trajectories, run_episode,
    save_trajectories,
)
from gaussnav.navigation.episodes import Episode, instruction_rows
from gaussnav.navigation.policy import STOP, PolicyConfig, Scorer
from gaussnav.navigation.training import (
    TrainConfig, TrainingError, batch_loss, collect_states, stack, train_on_batch, train_scorer,
)


def _neighbor_episode(scene):
    goal = 0
    start = scene.graph.neighbors(goal)[0]
    path = [start, goal]
    return Episode("nbr", "", start, goal, instruction_rows(scene, path, 1), path, 1)


def test_oracle_one_hop(small_scene):
    ep = _neighbor_episode(small_scene)
    tr = run_episode(small_scene, ep, OraclePolicy())
    assert tr.nodes == [ep.start, ep.goal] and tr.stop_step == 1
    assert basic_metrics(tr.nodes, ep, small_scene.graph)["SR"] == 1.0
    assert tr.grounded_instance == 1


def test_oracle_follows_gt(small_scene, small_episodes):
    for ep in small_episodes:
        assert run_episode(small_scene, ep, OraclePolicy()).nodes == ep.gt_path


def test_random_policy_deterministic(small_scene, small_episodes):
    a = [run_episode(small_scene, e, RandomPolicy(3)).to_dict() for e in small_episodes]
    b = [run_episode(small_scene, e, RandomPolicy(3)).to_dict() for e in small_episodes]
    assert a == b


def test_map_policy_deterministic_and_walks(small_maps, small_episodes):
    scene = small_maps.scene
    pol = lambda: MapPolicy(Scorer.init(1), PolicyConfig(), scene.codes)  # noqa: E731
    a = [run_episode(scene, e, pol(), small_maps) for e in small_episodes]
    b = [run_episode(scene, e, pol(), small_maps) for e in small_episodes]
    assert [t.to_dict() for t in a] == [t.to_dict() for t in b]
    for t in a:
        for u, v in zip(t.nodes[:-1], t.nodes[1:]):
            assert scene.graph.has_edge(u, v)
        assert len(t.nodes) - 1 <= PolicyConfig().step_cap
        for s in t.steps:
            assert sum(s["p_e"]) == pytest.approx(1.0)
            assert sum(s["p_c"].values()) == pytest.approx(3.0)


def test_step_cap(small_scene, small_episodes):
    class Bounce:
        name = "bounce"

        def decide(self, ctx):
            from gaussnav.navigation.agent import Decision
            ctx.memory.visit(ctx.memory.current, np.zeros(7), ctx.step)
            return Decision(ctx.scene.graph.neighbors(ctx.memory.current)[0], {})

    tr = run_episode(small_scene, small_episodes[0], Bounce(), cfg=PolicyConfig(step_cap=4))
    assert tr.terminated_by_cap and len(tr.nodes) == 5 and tr.stop_step is None


def test_memory_invariants():
    m = TopologicalMemory(0)
    m.visit(0, np.zeros(7), 0)
    m.observe(1, np.ones(7))
    m.observe(0, np.ones(7))  # already visited: ignored
    m.check()
    assert m.backtrack_candidates([0]) == [1]
    m.visit(1, np.ones(7), 1)
    assert 1 not in m.frontier
    m.check()
    m.frontier[0] = np.zeros(7)
    with pytest.raises(MemoryError_):
        m.check()


def test_trajectory_round_trip(tmp_path, small_scene, small_episodes):
    trs = [run_episode(small_scene, e, RandomPolicy(0)) for e in small_episodes]
    save_trajectories(trs, tmp_path / "t.json")
    assert [t.to_dict() for t in load_trajectories(tmp_path / "t.json")] == [t.to_dict() for t in trs]


def test_uniform_init_loss_is_log_candidates(small_maps, small_episodes):
    states = collect_states(small_maps, small_episodes[:2], PolicyConfig())
    b = stack(states)
    stats, _ = batch_loss(Scorer.init(0, uniform=True), b, with_grad=False)
    expect = np.mean([np.log(inp.n) for inp, lab in states if lab >= 0])
    assert stats["ce"] == pytest.approx(expect, abs=1e-6)
    assert stats["bce"] == pytest.approx(np.log(2), abs=1e-12)


def test_zero_steps_leaves_parameters(small_maps, small_episodes):
    b = stack(collect_states(small_maps, small_episodes[:2], PolicyConfig()))
    sc = train_on_batch(b, TrainConfig(steps=0, seed=4))
    ref = Scorer.init(4)
    for k, m in sc.modules().items():
        for name in m.NAMES:
            np.testing.assert_array_equal(getattr(m, name), getattr(ref.modules()[k], name))


def test_batch_loss_gradient_finite_differences(small_maps, small_episodes):
    b = stack(collect_states(small_maps, small_episodes[:2], PolicyConfig()))
    sc = Scorer.init(2)
    _, g = batch_loss(sc, b)
    h = 1e-6
    for mod in ("scene", "view", "instance", "stop"):
        P = sc.modules()[mod].W1
        for idx in [(0, 0), (3, 5)]:
            old = P[idx]
            P[idx] = old + h
            lp = batch_loss(sc, b, with_grad=False)[0]["total"]
            P[idx] = old - h
            lm = batch_loss(sc, b, with_grad=False)[0]["total"]
            P[idx] = old
            assert g[mod]["W1"][idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-4, abs=1e-8)


def test_training_beats_untrained_on_held_out(small_maps, small_episodes):
    train, held = small_episodes[:4], small_episodes[4:]
    sc = train_scorer([(small_maps, train)], TrainConfig(steps=150))
    tb = stack(collect_states(small_maps, held, PolicyConfig(), all_nodes=False))
    trained = batch_loss(sc, tb, with_grad=False)[0]["agreement"]
    untrained = batch_loss(Scorer.init(0), tb, with_grad=False)[0]["agreement"]
    assert trained >= untrained
    assert sc.curve[-1]["total"] < sc.curve[0]["total"]


def test_training_errors():
    with pytest.raises(TrainingError):
        stack([])
    with pytest.raises(TrainingError):
        TrainConfig(steps=-1)
