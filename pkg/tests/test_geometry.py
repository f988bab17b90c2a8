import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from monosfm.errors import CheiralityViolation, InvalidDepth, InvalidNeighbor, OutOfBounds, ValidationError
from monosfm.geometry import (CameraIntrinsics, PoseSE3, Raster, camera_depth, interpolate, lift, lift_pixels,
                              matrix_to_quat, point_depth_covariance, project, project_points, rotation_angle,
                              sample_bilinear, so3_exp, triangulation_angle)

K100 = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


def _pose_from_scipy(rot: Rotation, t) -> PoseSE3:
    x, y, z, w = rot.as_quat()
    return PoseSE3(np.array([w, x, y, z]), np.asarray(t, dtype=float))


def test_project_on_axis_and_pinhole():
    P = PoseSE3.identity()
    assert np.allclose(project(K100, P, np.array([0.0, 0.0, 2.0])), [50.0, 50.0], atol=0)
    assert np.allclose(project(K100, P, np.array([1.0, 0.0, 2.0])), [100.0, 50.0], atol=0)


def test_project_matches_matrix_composition():
    rot = Rotation.from_euler("y", 10, degrees=True)
    t = np.array([0.1, 0.0, 0.2])
    P = _pose_from_scipy(rot, t)
    X = np.array([0.3, -0.1, 1.5])
    # oracle: K [R | t] X in homogeneous coordinates, built from scipy's matrix
    M = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]]) @ np.hstack([rot.as_matrix(), t[:, None]])
    h = M @ np.append(X, 1.0)
    assert np.allclose(project(K100, P, X), h[:2] / h[2], atol=1e-12)


def test_project_behind_camera_raises():
    with pytest.raises(CheiralityViolation):
        project(K100, PoseSE3.identity(), np.array([0.0, 0.0, -1.0]))


def test_lift_inverse_of_project():
    X = lift(K100, PoseSE3.identity(), np.array([50.0, 50.0]), 2.0)
    assert np.allclose(X, [0.0, 0.0, 2.0], atol=0)


def test_lift_round_trip_random():
    rng = np.random.default_rng(3)
    for _ in range(100):
        P = PoseSE3.from_Rt(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        x = rng.uniform([0, 0], [99, 99])
        d = rng.uniform(0.1, 20.0)
        X = lift(K100, P, x, d)
        assert np.abs(project(K100, P, X) - x).max() < 1e-9
        assert abs(camera_depth(P, X) - d) < 1e-9


def test_lift_rejects_bad_depth():
    for d in (0.0, -1.0, np.nan):
        with pytest.raises(InvalidDepth):
            lift(K100, PoseSE3.identity(), np.array([10.0, 10.0]), d)
    with pytest.raises(OutOfBounds):
        lift(K100, PoseSE3.identity(), np.array([150.0, 10.0]), 1.0)


def test_camera_depth_examples():
    assert camera_depth(PoseSE3.identity(), np.array([0.0, 0.0, 3.0])) == 3.0
    P = PoseSE3(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, -1.0]))
    assert camera_depth(P, np.array([0.0, 0.0, 3.0])) == 2.0
    rot = Rotation.from_rotvec([0.2, -0.4, 0.1])
    P = _pose_from_scipy(rot, [0.3, 0.1, 0.5])
    X = np.array([0.5, 1.0, 4.0])
    assert np.isclose(camera_depth(P, X), (rot.as_matrix() @ X + [0.3, 0.1, 0.5])[2], atol=1e-14)


def test_vectorized_projection_agrees():
    rng = np.random.default_rng(0)
    P = PoseSE3.from_Rt(so3_exp([0.1, 0.2, -0.1]), [0.1, 0.0, 0.3])
    uv = rng.uniform(0, 99, size=(50, 2))
    d = rng.uniform(1, 5, size=50)
    X = lift_pixels(K100, P, uv, d)
    out, z = project_points(K100, P, X)
    assert np.abs(out - uv).max() < 1e-9
    assert np.abs(z - d).max() < 1e-12


def test_pose_group_axioms():
    rng = np.random.default_rng(1)
    poses = [PoseSE3.from_Rt(so3_exp(rng.normal(size=3)), rng.normal(size=3)) for _ in range(3)]
    a, b, c = poses
    left = a.compose(b).compose(c).matrix
    right = a.compose(b.compose(c)).matrix
    assert np.abs(left - right).max() < 1e-12
    ident = a.compose(a.inverse()).matrix
    assert np.abs(ident - np.eye(4)[:3]).max() < 1e-12
    assert abs(np.linalg.norm(a.rotation) - 1.0) < 1e-9


def test_quaternion_convention_and_sign():
    q = matrix_to_quat(Rotation.from_rotvec([0, 0, np.pi * 0.9]).as_matrix())
    assert q[0] >= 0
    P = PoseSE3(np.array([-1.0, 0.0, 0.0, 0.0]), np.zeros(3))
    assert P.rotation[0] == 1.0
    rot = Rotation.from_rotvec([0.3, 0.2, -0.5])
    x, y, z, w = rot.as_quat()
    assert np.allclose(PoseSE3(np.array([w, x, y, z]), np.zeros(3)).R, rot.as_matrix(), atol=1e-14)


def test_rotation_angle_small_and_large():
    for ang in (1e-9, 1e-4, 0.5, 3.0):
        R = Rotation.from_rotvec([0, ang, 0]).as_matrix()
        assert np.isclose(rotation_angle(R), ang, rtol=1e-6, atol=1e-15)


def test_intrinsics_validation():
    with pytest.raises(ValidationError):
        CameraIntrinsics(-1.0, 1.0, 5, 5, 10, 10)
    with pytest.raises(ValidationError):
        CameraIntrinsics(1.0, 1.0, 10, 5, 10, 10)


def test_interpolate_center_and_lattice():
    R = Raster(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
    assert interpolate(R, np.array([0.5, 0.5])) == 2.5
    assert interpolate(R, np.array([1.0, 0.0])) == 2.0
    assert interpolate(R, np.array([0.0, 1.0])) == 3.0


def test_interpolate_errors():
    R = Raster(np.array([[1.0, np.nan], [3.0, 4.0]], dtype=np.float32))
    with pytest.raises(InvalidNeighbor):
        interpolate(R, np.array([0.5, 0.5]))
    with pytest.raises(OutOfBounds):
        interpolate(R, np.array([1.5, 0.5]))


def test_interpolate_reproduces_affine():
    u, v = np.meshgrid(np.arange(8.0), np.arange(6.0))
    R = Raster((0.25 * u - 0.5 * v + 3.0).astype(np.float32))
    rng = np.random.default_rng(2)
    for x in rng.uniform([0, 0], [7, 5], size=(20, 2)):
        assert np.isclose(interpolate(R, x), 0.25 * x[0] - 0.5 * x[1] + 3.0, atol=1e-6)


def test_interpolate_normals_renormalized():
    n = np.zeros((2, 2, 3), dtype=np.float32)
    n[..., 2] = -1.0
    n[0, 1] = [1.0, 0.0, 0.0]
    out = interpolate(Raster(n), np.array([0.5, 0.5]))
    assert np.isclose(np.linalg.norm(out), 1.0)


def test_sample_bilinear_nan_outside():
    a = np.arange(12.0).reshape(3, 4)
    out = sample_bilinear(a, np.array([[1.5, 1.0], [-1.0, 0.0], [3.0, 2.0]]))
    assert out[0] == 5.5 and np.isnan(out[1]) and out[2] == 11.0


def test_point_depth_covariance_examples():
    sigma = 0.3
    assert np.isclose(point_depth_covariance(PoseSE3.identity(), sigma**2 * np.eye(3)), sigma**2)
    assert point_depth_covariance(PoseSE3.identity(), np.zeros((3, 3))) == 0.0
    rng = np.random.default_rng(5)
    P = PoseSE3.from_Rt(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    assert np.isclose(point_depth_covariance(P, sigma**2 * np.eye(3)), sigma**2, rtol=1e-12)
    A = rng.normal(size=(3, 3))
    S = A @ A.T
    moved = PoseSE3(P.rotation, P.translation + 10.0)
    assert np.isclose(point_depth_covariance(P, S), point_depth_covariance(moved, S), rtol=1e-14)


def test_point_depth_covariance_monte_carlo():
    rng = np.random.default_rng(11)
    P = PoseSE3.from_Rt(so3_exp([0.4, -0.3, 0.8]), [0.2, -0.1, 1.0])
    A = rng.normal(size=(3, 3))
    S = A @ A.T * 0.01
    X0 = np.array([0.3, 0.2, 3.0])
    draws = rng.multivariate_normal(X0, S, size=100_000)
    depths = draws @ P.R[2] + P.t[2]
    assert abs(point_depth_covariance(P, S) / depths.var() - 1.0) < 0.03


def test_triangulation_angle_right_angle():
    ang = triangulation_angle(np.array([-1.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 0, 1.0]))
    assert np.isclose(ang[0], np.pi / 2)
