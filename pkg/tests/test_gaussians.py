import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaussnav.gaussians import (
    Gaussian, GaussianMap, InitConfig, InitializationError, MapFormatError, PoolingError, covariance_from,
    init_from_pointcloud, load_map, map_from_bytes, map_to_bytes, pooled_feature, quat_rotmat_jacobian,
    quat_to_rotmat, save_map,
)
from gaussnav.geometry import PointCloud

from conftest import random_map


def test_covariance_isotropic_identity():
    np.testing.assert_allclose(covariance_from(np.ones(3), np.array([1.0, 0, 0, 0])), np.eye(3))


def test_covariance_axis_aligned():
    np.testing.assert_allclose(covariance_from(np.array([1.0, 2, 3]), np.array([1.0, 0, 0, 0])),
                               np.diag([1.0, 4, 9]))


def test_covariance_rotated_z90():
    q = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    np.testing.assert_allclose(covariance_from(np.array([2.0, 1, 1]), q), np.diag([1.0, 4, 1]), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1),
       st.lists(st.floats(0.01, 3), min_size=3, max_size=3))
def test_covariance_spd_property(q, s):
    c = covariance_from(np.array(s), np.array(q))
    np.testing.assert_allclose(c, c.T, atol=1e-12)
    assert np.linalg.eigvalsh(c).min() > 0
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(c)), np.sort(np.square(s)), rtol=1e-9)


def test_rotmat_orthonormal(rng):
    R = quat_to_rotmat(rng.normal(size=(20, 4)))
    np.testing.assert_allclose(R @ np.swapaxes(R, 1, 2), np.broadcast_to(np.eye(3), (20, 3, 3)), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0)


def test_rotmat_jacobian_finite_differences(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    J = quat_rotmat_jacobian(q[None])[0]
    h = 1e-6
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        # the map normalises q, so differentiate the unnormalised polynomial form
        fd = (_raw_rot(q + e) - _raw_rot(q - e)) / (2 * h)
        np.testing.assert_allclose(J[..., k] if J.shape[-1] == 4 else J[k], fd, atol=1e-6)


def _raw_rot(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def test_init_single_point():
    pc = PointCloud(np.array([[1.0, 2.0, 3.0]]), np.array([[0.1, 0.2, 0.3]]))
    m = init_from_pointcloud(pc)
    assert len(m) == 1
    np.testing.assert_allclose(m.mu[0], [1, 2, 3])


def test_init_cardinality(rng):
    pc = PointCloud(rng.uniform(0, 1, (57, 3)), rng.uniform(0, 1, (57, 3)))
    assert len(init_from_pointcloud(pc)) == 57


def test_init_nearest_neighbor_scale():
    pc = PointCloud(np.array([[0.0, 0, 0], [0.2, 0, 0]]), np.zeros((2, 3)))
    m = init_from_pointcloud(pc, InitConfig(scale_neighbors=1, scale_factor=0.5), dtype=np.float64)
    np.testing.assert_allclose(m.scale, 0.1)


def test_init_empty_cloud_raises():
    with pytest.raises(InitializationError):
        init_from_pointcloud(PointCloud(np.zeros((0, 3)), np.zeros((0, 3))))


def test_init_deterministic(rng):
    pc = PointCloud(rng.uniform(0, 1, (30, 3)), rng.uniform(0, 1, (30, 3)))
    a, b = init_from_pointcloud(pc, InitConfig(seed=3)), init_from_pointcloud(pc, InitConfig(seed=3))
    assert map_to_bytes(a) == map_to_bytes(b)
    a.validate()


def _hand_map():
    gs = [Gaussian(np.array([0.0, 0, 0]), np.ones(3), np.array([1.0, 0, 0, 0]), 0.5, np.array([1.0, 0, 0]), 0.0),
          Gaussian(np.array([1.0, 2, 3]), np.ones(3), np.array([1.0, 0, 0, 0]), 0.5, np.array([0.0, 1, 0]), 1.0),
          Gaussian(np.array([2.0, 4, 0]), np.ones(3), np.array([1.0, 0, 0, 0]), 0.5, np.array([0.0, 0, 1]), 0.5)]
    return GaussianMap.from_gaussians(gs, dtype=np.float64)


def test_pool_single():
    m = _hand_map()
    np.testing.assert_allclose(pooled_feature(m, [1]), [1, 2, 3, 0, 1, 0, 1])


def test_pool_two_semantics():
    assert pooled_feature(_hand_map(), [0, 1])[6] == pytest.approx(0.5)


def test_pool_full_map():
    np.testing.assert_allclose(pooled_feature(_hand_map()), [1, 2, 1, 1 / 3, 1 / 3, 1 / 3, 0.5])


def test_pool_errors():
    with pytest.raises(PoolingError):
        pooled_feature(_hand_map(), [])
    with pytest.raises(PoolingError):
        pooled_feature(_hand_map(), [5])


def test_serialization_round_trip(rng, tmp_path):
    m = random_map(rng, 100, dtype=np.float32)
    save_map(m, tmp_path / "m.g3dm")
    back = load_map(tmp_path / "m.g3dm")
    assert map_to_bytes(back) == map_to_bytes(m)
    for k in ("mu", "scale", "rotation", "opacity", "color", "semantic"):
        np.testing.assert_array_equal(getattr(back, k), getattr(m, k))


def test_serialization_truncated(rng):
    buf = map_to_bytes(random_map(rng, 5))
    with pytest.raises(MapFormatError, match="truncated"):
        map_from_bytes(buf[:-3])
    with pytest.raises(MapFormatError):
        map_from_bytes(buf[:6])
    with pytest.raises(MapFormatError, match="magic"):
        map_from_bytes(b"XXXX" + buf[4:])


def test_serialization_empty(tmp_path):
    save_map(GaussianMap.empty(), tmp_path / "e.g3dm")
    assert len((tmp_path / "e.g3dm").read_bytes()) == 12
    assert len(load_map(tmp_path / "e.g3dm")) == 0


def test_validate_rejects_bad_values(rng):
    m = random_map(rng, 4)
    m.opacity[0] = 1.5
    with pytest.raises(ValueError):
        m.validate()
