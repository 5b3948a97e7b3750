import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaussnav.metrics import (
    MetricsConfig, MetricsError, MetricsReport, basic_metrics, check_bounds, cls_score, coverage, dtw,
    dtw_bruteforce, episode_metrics, evaluate_trajectories, grounding_metrics, ndtw,
)
from gaussnav.navigation.agent import TrajectoryRecord
from gaussnav.navigation.episodes import Episode
from gaussnav.navigation.scene import NavGraph

X = np.zeros((1, 16))


def line(n, spacing=1.0):
    return NavGraph([[i * spacing, 0, 0] for i in range(n)], [(i, i + 1) for i in range(n - 1)])


def ep(graph, start, goal, target=None):
    return Episode("e", "", start, goal, X, graph.shortest_path(start, goal), target)


def traj(nodes, grounded=None, eid="e"):
    return TrajectoryRecord(eid, "test", list(nodes), [], len(nodes) - 1, grounded, False)


def test_optimal_path():
    g = line(4)
    m = basic_metrics([0, 1, 2, 3], ep(g, 0, 3), g)
    assert (m["SR"], m["SPL"], m["NE"], m["TL"]) == (1.0, 1.0, 0.0, 3.0)


def test_spl_half():
    g = line(3)
    m = basic_metrics([0, 1, 0, 1, 2], ep(g, 0, 2), g, MetricsConfig(d_th=0.5))
    assert m["TL"] == 4.0 and m["SPL"] == pytest.approx(0.5, abs=1e-12)


def test_failure():
    g = line(4, spacing=5.0)
    m = basic_metrics([0, 1], ep(g, 0, 3), g)
    assert (m["SR"], m["OSR"], m["SPL"]) == (0.0, 0.0, 0.0)


def test_oracle_success():
    g = line(4, spacing=5.0)
    m = basic_metrics([0, 1, 2, 3, 2], ep(g, 0, 3), g)
    assert m["SR"] == 0.0 and m["OSR"] == 1.0


def test_ne_geodesic_vs_euclidean():
    # a U-shaped graph: the ends are close in space but far on the graph
    g = NavGraph([[0, 0, 0], [0, 5, 0], [1, 5, 0], [1, 0, 0]], [(0, 1), (1, 2), (2, 3)])
    e = ep(g, 1, 3)
    assert basic_metrics([1, 0], e, g)["NE"] == pytest.approx(11.0)
    assert basic_metrics([1, 0], e, g, MetricsConfig(distance="euclidean"))["NE"] == pytest.approx(1.0)


def test_walk_errors():
    g = line(3)
    with pytest.raises(MetricsError):
        basic_metrics([0, 2], ep(g, 0, 2), g)
    with pytest.raises(MetricsError):
        basic_metrics([1, 2], ep(g, 0, 2), g)
    with pytest.raises(MetricsError):
        basic_metrics([], ep(g, 0, 2), g)


def test_ndtw_cases():
    R = np.array([[0.0, 0], [1, 0], [2, 1]])
    assert ndtw(R, R, 3.0) == 1.0
    assert ndtw(np.array([[3.0, 0]]), np.array([[0.0, 0]]), 3.0) == pytest.approx(math.exp(-1), abs=1e-12)
    with pytest.raises(MetricsError):
        ndtw(np.zeros((0, 2)), R, 3.0)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 6))
def test_dtw_matches_bruteforce(seed, n, m):
    r = np.random.default_rng(seed)
    P, R = r.normal(size=(n, 3)), r.normal(size=(m, 3))
    assert dtw(P, R) == pytest.approx(dtw_bruteforce(P, R), abs=1e-12)


def test_cls_perfect_and_hand_case():
    R = np.array([[0.0, 0, 0], [3.0, 0, 0]])
    assert cls_score(R, R, 3.0, 3.0, 3.0) == pytest.approx(1.0)
    P = np.array([[0.0, 0, 0], [0.0, 3.0, 0]])
    pc = (1 + math.exp(-1)) / 2
    assert coverage(P, R, 3.0) == pytest.approx(pc, abs=1e-12)
    assert pc == pytest.approx(0.6839, abs=1e-4)
    epl = pc * 3.0
    assert cls_score(P, R, 3.0, 3.0, 3.0) == pytest.approx(pc * epl / (epl + abs(epl - 3.0)), abs=1e-12)


def test_sdtw_and_cls_through_episode():
    g = line(4)
    e = ep(g, 0, 3)
    m = episode_metrics(traj([0, 1, 2, 3]), e, g)
    assert m["CLS"] == pytest.approx(1.0) and m["SDTW"] == m["SR"] == 1.0 and m["nDTW"] == 1.0
    g2 = line(4, spacing=5.0)
    m2 = episode_metrics(traj([0, 1]), ep(g2, 0, 3), g2)
    assert m2["SR"] == 0.0 and m2["SDTW"] == 0.0 and m2["nDTW"] > 0


def test_grounding_cases():
    assert grounding_metrics(1.0, 3, Episode("e", "", 0, 1, X, [0, 1], 3), 1.0, 1.0) == (1.0, 1.0)
    assert grounding_metrics(1.0, 2, Episode("e", "", 0, 1, X, [0, 1], 3), 1.0, 1.0) == (0.0, 0.0)
    assert grounding_metrics(1.0, 3, Episode("e", "", 0, 1, X, [0, 1], 3), 2.0, 1.0) == (1.0, 0.5)
    assert grounding_metrics(0.0, 3, Episode("e", "", 0, 1, X, [0, 1], 3), 1.0, 1.0)[0] == 0.0
    assert grounding_metrics(1.0, 3, Episode("e", "", 0, 1, X, [0, 1], None), 1.0, 1.0) is None


def test_aggregate_omits_missing_grounding():
    g = line(3)
    rows = []
    for i, tgt in enumerate((None, 2)):
        e = Episode(f"e{i}", "", 0, 2, X, [0, 1, 2], tgt)
        rows.append(evaluate_trajectories([traj([0, 1, 2], 2, f"e{i}")], [e], g).rows[0])
    agg = MetricsReport(rows).aggregate
    assert agg["RGS"] == 1.0 and agg["episodes"] == 2
    assert "mean" in MetricsReport(rows).to_table()


def test_unknown_episode():
    g = line(3)
    with pytest.raises(MetricsError):
        evaluate_trajectories([traj([0, 1], eid="zz")], [ep(g, 0, 2)], g)


def test_rigid_transform_invariance():
    r = np.random.default_rng(0)
    pos = r.uniform(0, 10, (6, 3))
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (1, 4), (0, 3)]
    c, s = math.cos(0.7), math.sin(0.7)
    Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    g1, g2 = NavGraph(pos, edges), NavGraph(pos @ Rz.T + [5, -2, 1], edges)
    e1, e2 = ep(g1, 0, 5, 1), ep(g2, 0, 5, 1)
    t = traj([0, 1, 4, 3, 4, 5], 1)
    a, b = episode_metrics(t, e1, g1), episode_metrics(t, e2, g2)
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-9)


def test_check_bounds_detects_violation():
    with pytest.raises(MetricsError):
        check_bounds({"TL": 1, "NE": 0, "SR": 0.0, "OSR": 0, "SPL": 0.5, "nDTW": 1, "SDTW": 0, "CLS": 1,
                      "RGS": None, "RGSPL": None})


def test_config_validation():
    with pytest.raises(MetricsError):
        MetricsConfig(d_th=0)
    with pytest.raises(MetricsError):
        MetricsConfig(distance="manhattan")
