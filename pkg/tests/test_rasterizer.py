import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaussnav.gaussians import Gaussian, GaussianMap
from gaussnav.geometry import CameraIntrinsics, Pose
from gaussnav.rasterizer import (
    RenderConfig, SplattedGaussian, alpha_at, covariance_2d, project_map, render, render_reference, splat,
)

from conftest import random_map

ID_Q = np.array([1.0, 0, 0, 0])
SMALL = CameraIntrinsics(10.0, 10.0, 4.0, 4.0, 9, 9)


def _g(mu, s=0.1, op=0.5, color=(1, 1, 1), sem=0.0):
    return Gaussian(np.asarray(mu, float), np.full(3, s), ID_Q, op, np.asarray(color, float), sem)


def _max_diff(a, b):
    return max(np.abs(a.rgb - b.rgb).max(), np.abs(a.depth - b.depth).max(),
               np.abs(a.semantic - b.semantic).max(), np.abs(a.alpha_acc - b.alpha_acc).max())


def test_on_axis_covariance_closed_form():
    intr = CameraIntrinsics(100.0, 80.0, 50.0, 50.0, 101, 101)
    m = GaussianMap.from_gaussians([_g([0, 0, 2.0], s=0.05)], dtype=np.float64)
    _, c = covariance_2d(m, intr, Pose.identity())
    np.testing.assert_allclose(c[0], np.diag([(100 * 0.05 / 2) ** 2, (80 * 0.05 / 2) ** 2]), atol=1e-12)


def test_doubled_depth_quarter_covariance():
    intr = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)
    a = covariance_2d(GaussianMap.from_gaussians([_g([0, 0, 2.0])], dtype=np.float64), intr, Pose.identity())[1]
    b = covariance_2d(GaussianMap.from_gaussians([_g([0, 0, 4.0])], dtype=np.float64), intr, Pose.identity())[1]
    np.testing.assert_allclose(b, a / 4, rtol=1e-12)


def test_behind_camera_culled():
    assert splat(_g([0, 0, -1.0]), SMALL, Pose.identity()) is None


def test_outside_guard_band_culled():
    # center projects far left of the image; a wide footprint would still reach it
    g = _g([-3.0, 0, 1.0], s=1.0, op=0.9)
    assert splat(g, SMALL, Pose.identity()) is None
    assert splat(g, SMALL, Pose.identity(), RenderConfig(guard_band=100.0)) is not None


def test_alpha_at_center_is_opacity():
    s = splat(_g([0, 0, 2.0], op=0.37), SMALL, Pose.identity())
    assert alpha_at(s, s.mu2d) == pytest.approx(0.37)


def test_alpha_at_half_offset():
    s = SplattedGaussian(0, np.zeros(2), np.eye(2), 1.0, 1.0, np.ones(3), 0.0)
    assert alpha_at(s, [math.sqrt(2 * math.log(2)), 0.0], RenderConfig(alpha_max=1.0)) == pytest.approx(0.5)


def test_alpha_at_far_is_culled():
    s = SplattedGaussian(0, np.zeros(2), np.eye(2), 1.0, 1.0, np.ones(3), 0.0)
    assert alpha_at(s, [50.0, 0.0]) == 0.0


def test_empty_map_background():
    cfg = RenderConfig(background=(0.2, 0.3, 0.4))
    fr = render(GaussianMap.empty(), SMALL, Pose.identity(), cfg)
    np.testing.assert_array_equal(fr.rgb, np.broadcast_to([0.2, 0.3, 0.4], (9, 9, 3)))
    assert not fr.depth.any() and not fr.semantic.any() and not fr.alpha_acc.any()


def test_single_opaque_splat():
    cfg = RenderConfig(alpha_max=1.0)
    m = GaussianMap.from_gaussians([_g([0, 0, 3.0], op=1.0, color=(0.2, 0.5, 0.7))], dtype=np.float64)
    fr = render(m, SMALL, Pose.identity(), cfg)
    np.testing.assert_allclose(fr.rgb[4, 4], [0.2, 0.5, 0.7])
    assert fr.depth[4, 4] == pytest.approx(3.0)
    assert fr.alpha_acc[4, 4] == pytest.approx(1.0)


def test_two_splat_compositing():
    cfg = RenderConfig(alpha_max=1.0)
    m = GaussianMap.from_gaussians([_g([0, 0, 2.0], op=1.0, color=(0, 0, 1)),
                                    _g([0, 0, 1.0], op=0.5, color=(1, 0, 0))], dtype=np.float64)
    for fr in (render(m, SMALL, Pose.identity(), cfg), render_reference(m, SMALL, Pose.identity(), cfg)):
        np.testing.assert_allclose(fr.rgb[4, 4], [0.5, 0, 0.5])
        assert fr.depth[4, 4] == pytest.approx(1.5)


def test_reference_empty_map():
    a = render(GaussianMap.empty(), SMALL, Pose.identity())
    b = render_reference(GaussianMap.empty(), SMALL, Pose.identity())
    assert _max_diff(a, b) == 0


def test_single_splat_bit_identical():
    cfg = RenderConfig(early_stop=0.0)
    m = GaussianMap.from_gaussians([_g([0.1, -0.05, 2.0], s=0.2, op=0.8, color=(0.3, 0.6, 0.9), sem=0.4)],
                                   dtype=np.float64)
    intr = CameraIntrinsics.from_fov(32, 32, 60)
    a, b = render(m, intr, Pose.identity(), cfg), render_reference(m, intr, Pose.identity(), cfg)
    assert _max_diff(a, b) == 0.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 50), tile=st.sampled_from([4, 8, 16]))
def test_tile_matches_reference_property(seed, n, tile):
    m = random_map(np.random.default_rng(seed), n)
    intr = CameraIntrinsics.from_fov(48, 40, 80)
    cfg = RenderConfig(tile_size=tile)
    assert _max_diff(render(m, intr, Pose.identity(), cfg), render_reference(m, intr, Pose.identity(), cfg)) <= 1e-5


def test_output_independent_of_tile_size_and_workers(rng):
    m = random_map(rng, 120)
    intr = CameraIntrinsics.from_fov(64, 64, 90)
    base = render(m, intr, Pose.identity(), RenderConfig(tile_size=16))
    for cfg in (RenderConfig(tile_size=4), RenderConfig(tile_size=8, workers=4), RenderConfig(workers=3)):
        assert _max_diff(base, render(m, intr, Pose.identity(), cfg)) <= 1e-12
    again = render(m, intr, Pose.identity(), RenderConfig(tile_size=8, workers=4))
    b2 = render(m, intr, Pose.identity(), RenderConfig(tile_size=8, workers=1))
    np.testing.assert_array_equal(again.rgb, b2.rgb)
    np.testing.assert_array_equal(again.depth, b2.depth)


def test_float32_compute_close(rng):
    m = random_map(rng, 80)
    intr = CameraIntrinsics.from_fov(48, 48, 90)
    a = render(m, intr, Pose.identity())
    b = render(m, intr, Pose.identity(), RenderConfig(compute_dtype="float32"))
    assert _max_diff(a, b) < 1e-4


def test_early_stop_error_bound(rng):
    # stopping at transmittance T drops at most T * max|feature| per channel
    m = random_map(rng, 200)
    intr = CameraIntrinsics.from_fov(48, 48, 90)
    ref = render_reference(m, intr, Pose.identity())
    fr = render(m, intr, Pose.identity(), RenderConfig(early_stop=1e-4))
    assert np.abs(fr.depth - ref.depth).max() <= 1e-4 * m.mu[:, 2].max() + 1e-12
    assert np.abs(fr.rgb - ref.rgb).max() <= 1e-4 + 1e-12


def test_alpha_acc_bounds_and_semantics_linear(rng):
    m = random_map(rng, 60)
    intr = CameraIntrinsics.from_fov(32, 32, 90)
    fr = render(m, intr, Pose.identity())
    assert fr.alpha_acc.min() >= 0 and fr.alpha_acc.max() <= 1
    m2 = m.copy()
    m2.semantic = 2.0 * m.semantic
    np.testing.assert_allclose(render(m2, intr, Pose.identity()).semantic, 2.0 * fr.semantic, atol=1e-12)


def test_projection_sorted_front_to_back(rng):
    spl = project_map(random_map(rng, 50), CameraIntrinsics.from_fov(32, 32, 90), Pose.identity())
    assert np.all(np.diff(spl.z) >= 0)


def test_dominant_index(rng):
    cfg = RenderConfig(alpha_max=1.0)
    m = GaussianMap.from_gaussians([_g([0, 0, 2.0], op=1.0), _g([0, 0, 1.0], op=0.9)], dtype=np.float64)
    fr = render(m, SMALL, Pose.identity(), cfg)
    assert fr.dominant[4, 4] == 1


def test_invalid_config():
    for kw in ({"tile_size": 0}, {"alpha_cull": 0.0}, {"workers": 0}, {"compute_dtype": "f16"}):
        with pytest.raises(ValueError):
            RenderConfig(**kw)
