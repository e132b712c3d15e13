import numpy as np
import pytest
from hypothesis import given, strategies as st

from instpifu.geometry import Camera, random_rotation
from instpifu.mesh import icosphere, room_shell
from instpifu.metrics import (DegenerateInputError, background_cd, chamfer_distance, evaluate_grid, fscore,
                              icp_align, marching_cubes, nearest_sq)
from oracles import brute_chamfer, brute_fscore, brute_nearest_sq, sphere_field

sizes = st.integers(1, 60)


def test_chamfer_examples():
    P = np.random.default_rng(0).normal(size=(20, 3))
    assert chamfer_distance(P, P) == 0.0
    assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    with pytest.raises(DegenerateInputError):
        chamfer_distance(np.zeros((0, 3)), P)


def test_chamfer_equals_scalar_loop():
    rng = np.random.default_rng(1)
    P, Q = rng.random((500, 3)), rng.random((400, 3))
    assert chamfer_distance(P, Q) == brute_chamfer(P, Q)


def test_nearest_equals_scalar_loop_up_to_2000():
    rng = np.random.default_rng(2)
    P, Q = rng.random((200, 3)), rng.random((2000, 3))
    np.testing.assert_array_equal(nearest_sq(P, Q), brute_nearest_sq(P, Q))


def test_fscore_examples():
    P = np.random.default_rng(0).random((30, 3))
    assert fscore(P, P) == 100.0
    assert fscore(P, P + 10) == 0.0
    with pytest.raises(ValueError):
        fscore(P, P, tau=0)
    Q = np.random.default_rng(5).random((40, 3))
    assert fscore(P, Q, 0.1) == brute_fscore(P, Q, 0.1)


@given(sizes, sizes, st.integers(0, 10_000))
def test_metric_symmetry_and_invariance(n, m, seed):
    rng = np.random.default_rng(seed)
    P, Q = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    assert chamfer_distance(P, Q) == chamfer_distance(Q, P)
    assert fscore(P, Q, 0.5) == fscore(Q, P, 0.5)
    R, t = random_rotation(rng), rng.normal(size=3)
    moved = chamfer_distance(P @ R.T + t, rng.permutation(Q) @ R.T + t)
    assert moved == pytest.approx(chamfer_distance(P, Q), abs=1e-9)


def test_marching_cubes_sphere_radius():
    m = marching_cubes(sphere_field(0.4), ([-1] * 3, [1] * 3), 128)
    r = np.linalg.norm(m.vertices, axis=1)
    assert np.all(np.abs(r - 0.4) <= 2 * 2 / 128)
    assert m.watertight


def test_marching_cubes_constant_field_is_empty():
    m = marching_cubes(lambda X: np.ones(len(X)), ([-1] * 3, [1] * 3), 16, close=False)
    assert m.is_empty


def test_marching_cubes_half_space_planar():
    m = marching_cubes(lambda X: (X[:, 0] < 0).astype(float), ([-1] * 3, [1] * 3), 16, close=False)
    assert not m.is_empty
    assert np.all(np.abs(m.vertices[:, 0]) <= 2 / 16)


def test_coarse_grid_matches_dense_near_surface():
    f = sphere_field(0.55)
    dense = evaluate_grid(f, ([-1] * 3, [1] * 3), 32)
    fast = evaluate_grid(f, ([-1] * 3, [1] * 3), 32, coarse=4)
    a = marching_cubes(f, ([-1] * 3, [1] * 3), 32, values=dense)
    b = marching_cubes(f, ([-1] * 3, [1] * 3), 32, values=fast)
    np.testing.assert_allclose(a.vertices, b.vertices)


def asymmetric_cloud(rng, n=400):
    # distinct principal variances and a skewed tail, so the best alignment is unique
    P = rng.normal(size=(n, 3)) * [1.0, 0.6, 0.3]
    P[:, 0] += 0.5 * P[:, 1] ** 2
    return P


@pytest.mark.parametrize("seed", range(5))
def test_icp_recovers_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    P = asymmetric_cloud(rng)
    R, t = random_rotation(rng), rng.normal(size=3)
    T, aligned = icp_align(P, P @ R.T + t, max_iters=100, tol=0, with_scale=False, init="pca")
    assert np.linalg.norm(T.R - R) < 1e-5
    assert np.linalg.norm(T.t - t) < 1e-6


def test_icp_identity_and_monotone(rng):
    P = rng.normal(size=(100, 3))
    T, aligned = icp_align(P, P)
    np.testing.assert_allclose(T.R, np.eye(3), atol=1e-9)
    Q = rng.normal(size=(120, 3)) * [1, 2, 0.5]
    _, aligned = icp_align(P, Q)
    assert chamfer_distance(aligned, Q) <= chamfer_distance(P, Q) + 1e-12
    with pytest.raises(DegenerateInputError):
        icp_align(np.outer(np.arange(5.0), [1, 1, 0]), Q)


def _room_scene():
    # narrow view: only the back wall z = 5 lies inside the frustum
    cam = Camera.from_fov(64, 64, 200.0)
    room, _ = room_shell(-2.5, 2.5, -1.0, 5.0, -1.4, 1.4)
    return cam, room


def test_background_cd_self_and_shift():
    cam, room = _room_scene()
    noise = background_cd(room, room, cam, 0.1, 10.0, k=4000, seed=1)
    assert background_cd(room, room, cam, 0.1, 10.0, k=4000, seed=1) == noise
    shifted = room.transformed(lambda v: v + [0, 0, 0.1])
    cd = background_cd(shifted, room, cam, 0.1, 10.0, k=4000, seed=1)
    # parallel planes 0.1 m apart: 0.01 in each direction
    assert noise < 1e-3
    assert cd == pytest.approx(2 * 0.01, rel=0.2)
