import numpy as np
import pytest
from hypothesis import given, strategies as st

from instpifu.geometry import (BehindCameraError, Box2D, Camera, InstancePose, InvalidDistanceError,
                               camera_rotation, camera_to_canonical, canonical_to_camera, frustum_contains,
                               outside_roi, pose_from_projection, project, projection_offset, roi_uv)

angles = st.floats(-0.6, 0.6)


def cam64(**kw):
    return Camera(100.0, 100.0, 32.0, 32.0, 64, 64, **kw)


def random_pose(rng):
    up = camera_rotation(rng.uniform(-0.4, 0.4), rng.uniform(-0.2, 0.2))
    return InstancePose(rng.uniform(-2, 2, 3) + [0, 0, 4], rng.uniform(0.1, 2, 3), rng.uniform(-np.pi, np.pi),
                        int(rng.integers(9)), up)


def test_project_examples():
    cam = cam64()
    np.testing.assert_allclose(project(cam, [0, 0, 1]), [32, 32])
    np.testing.assert_allclose(project(cam, [0.5, 0, 2]), [57, 32])
    with pytest.raises(BehindCameraError):
        project(cam, [0, 0, -1])


@given(st.floats(0.01, 100), st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 10))
def test_project_scale_invariant_along_rays(lam, x, y, z):
    cam = cam64()
    X = np.array([x, y, z])
    np.testing.assert_allclose(project(cam, lam * X), project(cam, X), atol=1e-9)


def test_canonical_examples():
    ident = InstancePose([0, 0, 0], [1, 1, 1], 0.0)
    np.testing.assert_allclose(canonical_to_camera(ident, [0.3, -0.2, 0.5]), [0.3, -0.2, 0.5])
    half = InstancePose([0, 0, 2], [1, 1, 1], np.pi)
    np.testing.assert_allclose(canonical_to_camera(half, [1, 0, 0]), [-1, 0, 2], atol=1e-12)


def test_canonical_round_trip_1000_poses(rng):
    worst = 0.0
    for _ in range(1000):
        pose = random_pose(rng)
        X = rng.uniform(-1, 1, (8, 3))
        worst = max(worst, np.abs(camera_to_canonical(pose, canonical_to_camera(pose, X)) - X).max())
    assert worst < 1e-9


def test_pose_from_projection_axis_and_errors():
    cam = cam64()
    pose = pose_from_projection(cam, [32, 32], [0, 0], 2.0, [1, 1, 1], 0.0)
    np.testing.assert_allclose(pose.center, [0, 0, 2], atol=1e-12)
    with pytest.raises(InvalidDistanceError):
        pose_from_projection(cam, [32, 32], [0, 0], 0.0, [1, 1, 1], 0.0)


def test_pose_from_projection_matches_ray_construction():
    cam = cam64()
    pose = pose_from_projection(cam, [32, 32], [10, 0], 1.0, [1, 1, 1], 0.0)
    # pixel offset 10 at f=100 is the ray direction (0.1, 0, 1)
    ray = np.array([0.1, 0.0, 1.0])
    np.testing.assert_allclose(pose.center, ray / np.sqrt(1.01), atol=1e-12)
    assert pose.center[0] == pytest.approx(0.1 / np.sqrt(1.01))


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.5, 10), st.floats(10, 54), st.floats(10, 54))
def test_pose_from_projection_round_trip(dx, dy, d, bx, by):
    cam = cam64()
    box = Box2D(bx - 5, by - 5, bx + 5, by + 5)
    pose = pose_from_projection(cam, box.center, [dx, dy], d, [1, 1, 1], 0.0)
    delta, dist = projection_offset(cam, pose, box)
    np.testing.assert_allclose(delta, [dx, dy], atol=1e-6)
    assert dist == pytest.approx(d)


@given(angles, angles)
def test_camera_rotation_orthonormal(pitch, roll):
    R = camera_rotation(pitch, roll)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-6)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_positive_pitch_looks_down():
    # world y points down, so a downward-looking camera sees the floor point near the image center
    cam = Camera.from_fov(64, 64, 60.0, pitch=0.3)
    floor_point = np.array([0.0, np.tan(0.3) * 3, 3.0])
    uv = project(cam, cam.world_to_camera(floor_point))
    assert abs(uv[1] - 32) < 1e-9


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(-1.0, 1.0, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 5, 1, 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 1, 1, 4, 4, R=np.ones((3, 3)))


def test_camera_dict_round_trip():
    cam = Camera.from_fov(64, 48, 55.0, 0.2, -0.05, (0.1, 0.2, 0.3))
    back = Camera.from_dict(cam.to_dict())
    np.testing.assert_array_equal(back.R, cam.R)
    np.testing.assert_array_equal(back.t, cam.t)
    np.testing.assert_allclose(cam.camera_to_world(cam.world_to_camera([1.0, 2.0, 3.0])), [1, 2, 3])


def test_frustum_examples_and_grid_oracle():
    cam = cam64()
    assert frustum_contains(cam, np.array([0, 0, 2.5]), 1.0, 4.0)
    assert not frustum_contains(cam, np.array([0, 0, 8.0]), 1.0, 4.0)
    g = np.linspace(-3, 5, 21)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    fast = frustum_contains(cam, pts, 0.5, 4.0)
    slow = []
    for X in pts:
        ok = 0.5 <= X[2] <= 4.0
        if ok:
            u, v = project(cam, X)
            ok = 0 <= u <= 64 and 0 <= v <= 64
        slow.append(ok)
    np.testing.assert_array_equal(fast, slow)
    assert fast.sum() > 0


def test_roi_uv_examples():
    box = Box2D(10, 20, 30, 60)
    np.testing.assert_allclose(roi_uv(box, [10, 20]), [0, 0])
    np.testing.assert_allclose(roi_uv(box, box.center), [0.5, 0.5])
    uv = roi_uv(box, [5, 70])
    assert uv[0] < 0 and uv[1] > 1 and outside_roi(uv)
    with pytest.raises(ValueError):
        Box2D(1, 1, 1, 2)


@given(st.floats(-np.pi * 3, np.pi * 3))
def test_pose_yaw_wrapped(yaw):
    pose = InstancePose([0, 0, 1], [1, 1, 1], yaw)
    assert -np.pi <= pose.yaw < np.pi
    np.testing.assert_allclose(pose.rotation @ pose.rotation.T, np.eye(3), atol=1e-12)


def test_pose_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        InstancePose([0, 0, 1], [1, 0, 1], 0.0)
