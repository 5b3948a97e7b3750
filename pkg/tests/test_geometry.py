import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaussnav.geometry import (
    BehindCamera, CameraIntrinsics, GeometryError, PointCloud, Pose, backproject_frame, backproject_pixel,
    project_point, project_points,
)

INTR = CameraIntrinsics(100.0, 100.0, 112.0, 112.0, 224, 224)


def test_backproject_principal_point():
    np.testing.assert_allclose(backproject_pixel(INTR, 112, 112, 2.0), [0, 0, 2.0])


def test_backproject_offset_pixel():
    np.testing.assert_allclose(backproject_pixel(INTR, 212, 112, 1.0), [1.0, 0, 1.0])


def test_backproject_zero_depth_rejected():
    assert backproject_pixel(INTR, 10, 10, 0.0) is None


def test_frame_identity_single_pixel():
    depth = np.zeros((224, 224))
    depth[112, 212] = 1.0
    pc = backproject_frame(INTR, Pose.identity(), depth, np.zeros((224, 224, 3)))
    assert len(pc) == 1
    np.testing.assert_allclose(pc.points[0], [1.0, 0, 1.0])


def test_frame_all_zero_depth_is_empty():
    pc = backproject_frame(INTR, Pose.identity(), np.zeros((224, 224)), np.zeros((224, 224, 3)))
    assert len(pc) == 0


def test_frame_pure_translation():
    depth = np.zeros((224, 224))
    depth[112, 212] = 1.0
    t = np.array([0.5, -2.0, 3.0])
    pc = backproject_frame(INTR, Pose(np.eye(3), t), depth, np.zeros((224, 224, 3)))
    np.testing.assert_allclose(pc.points[0], np.array([1.0, 0, 1.0]) + t)


def test_frame_shape_mismatch():
    with pytest.raises(GeometryError):
        backproject_frame(INTR, Pose.identity(), np.zeros((10, 10)), np.zeros((224, 224, 3)))


def test_project_axis_point():
    u, v, z = project_point(INTR, Pose.identity(), [0, 0, 2.0])
    assert (u, v, z) == (112.0, 112.0, 2.0)


def test_project_offset_point():
    u, _, _ = project_point(INTR, Pose.identity(), [1.0, 0, 1.0])
    assert u == pytest.approx(212.0)


def test_project_behind_camera():
    with pytest.raises(BehindCamera):
        project_point(INTR, Pose.identity(), [0, 0, -1.0])


@settings(max_examples=200, deadline=None)
@given(u=st.floats(0, 223), v=st.floats(0, 223), d=st.floats(0.05, 50.0),
       yaw=st.floats(-math.pi, math.pi), tx=st.floats(-5, 5))
def test_round_trip_property(u, v, d, yaw, tx):
    pose = Pose.look_along([tx, 1.0, 1.4], yaw)
    p_cam = backproject_pixel(INTR, u, v, d)
    p = pose.camera_to_world(p_cam[None])[0]
    uu, vv, zz = project_point(INTR, pose, p)
    assert abs(uu - u) < 1e-9 and abs(vv - v) < 1e-9 and abs(zz - d) < 1e-9


def test_pose_rejects_non_rotation():
    with pytest.raises(GeometryError):
        Pose(np.diag([1.0, 1.0, -1.0]))


def test_pose_dict_round_trip():
    p = Pose.look_along([1, 2, 3], 0.7)
    q = Pose.from_dict(p.to_dict())
    np.testing.assert_array_equal(p.rotation, q.rotation)
    np.testing.assert_array_equal(p.translation, q.translation)


def test_intrinsics_from_fov():
    c = CameraIntrinsics.from_fov(224, 224, 90.0)
    assert c.fx == pytest.approx(112.0)
    assert CameraIntrinsics.from_dict(c.to_dict()) == c


def test_look_along_is_z_up():
    # camera +z looks along the azimuth, image down (+y) points to world -z
    p = Pose.look_along([0, 0, 1], 0.0)
    np.testing.assert_allclose(p.rotation[:, 2], [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(p.rotation[:, 1], [0, 0, -1], atol=1e-12)


def test_project_points_vectorized(rng):
    p = rng.uniform(-1, 1, (50, 3)) + [0, 0, 3]
    uv, z, ok = project_points(INTR, Pose.identity(), p)
    assert ok.all()
    for i in range(5):
        np.testing.assert_allclose([*uv[i], z[i]], project_point(INTR, Pose.identity(), p[i]))


def test_voxel_downsample_keeps_one_per_cell():
    pts = np.array([[0.01, 0.01, 0.01], [0.02, 0.02, 0.02], [1.0, 1.0, 1.0]])
    pc = PointCloud(pts, np.zeros((3, 3)))
    assert len(pc.voxel_downsample(0.1)) == 2
