import numpy as np
import pytest

from gaussnav.gaussians import map_to_bytes
from gaussnav.navigation.episodes import (
    COL_CODE, COL_GOAL, Episode, EpisodeConfig, EpisodeError, goal_node_for, instruction_rows, is_door,
    load_episodes, make_episodes, save_episodes,
)
from gaussnav.navigation.scene import NavGraph, SceneConfig, SceneConfigError, generate_scene, load_scene, save_scene
from gaussnav.semantics import codebook


def test_same_seed_identical():
    a, b = generate_scene(4), generate_scene(4)
    assert map_to_bytes(a.gmap) == map_to_bytes(b.gmap)
    assert a.graph.edges == b.graph.edges
    assert map_to_bytes(generate_scene(5).gmap) != map_to_bytes(a.gmap)


def test_grid_connected_and_sized():
    s = generate_scene(0)
    assert len(s.graph) >= 4
    assert len(s.graph) == 24  # 5 nodes per room plus 4 doors
    d = s.graph.distances()
    assert np.isfinite(d).all()
    assert len(s.room_centers) == 4


def test_instance_codes_follow_codebook():
    s = generate_scene(1, SceneConfig(instances_per_room=2))
    np.testing.assert_allclose(s.codes, codebook(8))
    for inst in s.instances:
        assert inst.code == pytest.approx((inst.id - 0.5) / 8)
        np.testing.assert_allclose(s.gmap.semantic[inst.indices], inst.code, atol=1e-6)
        assert inst.indices.max() < len(s.gmap)
    s.gmap.validate()


def test_scene_round_trip(tmp_path):
    s = generate_scene(2, SceneConfig(rows=1, cols=2))
    save_scene(s, tmp_path / "s.json")
    t = load_scene(tmp_path / "s.json")
    assert map_to_bytes(t.gmap) == map_to_bytes(s.gmap)
    assert t.graph.edges == s.graph.edges
    assert [i.id for i in t.instances] == [i.id for i in s.instances]
    assert t.node_room == s.node_room


def test_scene_config_validation():
    with pytest.raises(SceneConfigError):
        SceneConfig(rows=0)
    with pytest.raises(SceneConfigError):
        SceneConfig(door_width=10.0)


def test_graph_invariants():
    with pytest.raises(ValueError):
        NavGraph([[0, 0, 0], [1, 0, 0], [5, 5, 0]], [(0, 1)])  # disconnected
    with pytest.raises(ValueError):
        NavGraph([[0, 0, 0], [1, 0, 0]], [(0, 1), (1, 1)])  # self-loop


def test_graph_paths_and_tie_rule():
    # a square: 0 -> 3 has two equal shortest paths, via 1 and via 2
    g = NavGraph([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], [(0, 1), (0, 2), (1, 3), (2, 3)])
    assert g.shortest_path(0, 3) == [0, 1, 3]
    assert g.next_hop(0, 3) == 1
    assert g.geodesic(0, 3) == pytest.approx(2.0)
    assert g.path_length([0, 1, 3, 2]) == pytest.approx(3.0)
    assert g.shortest_path(0, 3, allowed={0, 2, 3}) == [0, 2, 3]
    assert NavGraph.from_dict(g.to_dict()).edges == g.edges


def test_episodes_valid_and_deterministic():
    s = generate_scene(0)
    eps = make_episodes(s, 3, EpisodeConfig(count=8))
    assert [e.to_dict() for e in eps] == [e.to_dict() for e in make_episodes(s, 3, EpisodeConfig(count=8))]
    for e in eps:
        assert e.start != e.goal
        assert s.graph.path_length(e.gt_path) == pytest.approx(s.graph.geodesic(e.start, e.goal))
        assert s.graph.geodesic(e.start, e.goal) >= 5.0
        assert e.goal == goal_node_for(s, e.target_instance)
        assert s.node_room[e.goal] == s.instance(e.target_instance).room
        assert e.instruction[-1, COL_GOAL] == 1.0
        assert e.instruction[-1, COL_CODE] == pytest.approx(s.instance(e.target_instance).code)
        assert e.instruction[:-1, COL_GOAL].sum() == 0


def test_instruction_rows_skip_doors():
    s = generate_scene(0)
    path = s.graph.shortest_path(0, 5)  # room 0 center to room 1 center, via a door
    assert any(is_door(s, n) for n in path)
    rows = instruction_rows(s, path, None)
    assert len(rows) == 2


def test_episode_invariants():
    s = generate_scene(0)
    X = np.zeros((1, 16))
    with pytest.raises(EpisodeError):
        Episode("x", "", 0, 0, X, [0], None)
    with pytest.raises(EpisodeError):
        Episode("x", "", 0, 5, X, [0, 1], None)


def test_episodes_round_trip(tmp_path):
    s = generate_scene(0)
    eps = make_episodes(s, 1, EpisodeConfig(count=3), "scene.json")
    save_episodes(eps, tmp_path / "e.json")
    back = load_episodes(tmp_path / "e.json")
    assert [e.to_dict() for e in back] == [e.to_dict() for e in eps]
