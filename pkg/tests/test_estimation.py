import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from monosfm.errors import InsufficientMatches
from monosfm.estimation import (decompose_essential, essential_8point, estimate_absolute_pose,
                                estimate_relative_pose, normalized_coords, ransac_iterations, sampson_px,
                                triangulate)
from monosfm.geometry import CameraIntrinsics, PoseSE3, project_points, rotation_angle, skew

K = CameraIntrinsics(300.0, 300.0, 160.0, 120.0, 320, 240)


def _two_view(n, rng, angle_deg=10.0, scale=1.0):
    """Points around z=4 seen by the identity camera and by one orbiting it by angle_deg."""
    X = np.column_stack([rng.uniform(-1.2, 1.2, n), rng.uniform(-0.9, 0.9, n), rng.uniform(3.0, 5.0, n)])
    a = np.deg2rad(angle_deg)
    R = Rotation.from_rotvec([0, -a, 0]).as_matrix()
    C = np.array([4 * np.sin(a), 0.0, 4 - 4 * np.cos(a)])
    Pb = PoseSE3.from_Rt(R, -R @ C * scale)
    X = X * scale
    ua, _ = project_points(K, PoseSE3.identity(), X)
    ub, _ = project_points(K, Pb, X)
    return X, Pb, ua, ub


def _dir_err(t, t_ref):
    c = t @ t_ref / (np.linalg.norm(t) * np.linalg.norm(t_ref))
    return np.arccos(np.clip(c, -1, 1))


def test_eight_point_noiseless_is_exact():
    rng = np.random.default_rng(0)
    X, Pb, ua, ub = _two_view(30, rng)
    E = essential_8point(normalized_coords(K, ua), normalized_coords(K, ub))
    assert sampson_px(E, K, K, ua, ub).max() < 1e-6
    # oracle: [t]x R from the planted pose, compared up to scale and sign
    E_ref = skew(Pb.t) @ Pb.R
    E_ref /= np.linalg.norm(E_ref)
    E = E / np.linalg.norm(E)
    assert min(np.abs(E - E_ref).max(), np.abs(E + E_ref).max()) < 1e-8


def test_decompose_contains_planted_pose():
    R = Rotation.from_rotvec([0.1, -0.2, 0.05]).as_matrix()
    t = np.array([0.6, 0.0, 0.8])
    cands = decompose_essential(skew(t) @ R)
    assert len(cands) == 4
    assert any(np.allclose(Rc, R, atol=1e-12) and np.allclose(tc, t, atol=1e-12) for Rc, tc in cands)


def test_relative_pose_noiseless():
    rng = np.random.default_rng(1)
    X, Pb, ua, ub = _two_view(30, rng)
    res = estimate_relative_pose(K, K, ua, ub, seed=0)
    assert res.success and res.stable
    assert res.inlier_count == 30
    assert rotation_angle(res.model.R @ Pb.R.T) < 1e-5
    assert _dir_err(res.model.t, Pb.t) < 1e-5
    assert np.isclose(np.linalg.norm(res.model.t), 1.0)


def test_relative_pose_parallax_report():
    rng = np.random.default_rng(1)
    X, Pb, ua, ub = _two_view(30, rng)
    res = estimate_relative_pose(K, K, ua, ub, seed=0)
    # oracle: median triangulation angle at the planted points
    ca, cb = np.zeros(3), Pb.center
    r1, r2 = X - ca, X - cb
    ang = np.arccos(np.einsum("ij,ij->i", r1, r2) / np.linalg.norm(r1, axis=1) / np.linalg.norm(r2, axis=1))
    assert np.isclose(res.parallax_deg, np.degrees(np.median(ang)), rtol=1e-6)


def test_pure_rotation_is_unstable():
    rng = np.random.default_rng(2)
    X = np.column_stack([rng.uniform(-1, 1, 40), rng.uniform(-1, 1, 40), rng.uniform(3, 6, 40)])
    Pb = PoseSE3.from_Rt(Rotation.from_rotvec([0.02, 0.1, 0.0]).as_matrix(), np.zeros(3))
    ua, _ = project_points(K, PoseSE3.identity(), X)
    ub, _ = project_points(K, Pb, X)
    ub = ub + rng.normal(scale=0.3, size=ub.shape)
    res = estimate_relative_pose(K, K, ua, ub, seed=0)
    assert not res.stable
    assert res.parallax_deg < 1.5


def test_relative_pose_planted_outliers():
    rng = np.random.default_rng(3)
    X, Pb, ua, ub = _two_view(100, rng, angle_deg=15.0)
    out = rng.permutation(100)[:50]
    ub = ub.copy()
    # outliers are redrawn until they sit well off their true epipolar line,
    # so the planted labelling is unambiguous
    E_true = skew(Pb.t) @ Pb.R
    for k in out:
        while True:
            ub[k] = rng.uniform([0, 0], [319, 239])
            if sampson_px(E_true, K, K, ua[k:k + 1], ub[k:k + 1])[0] > 12.0:
                break
    planted = np.ones(100, dtype=bool)
    planted[out] = False
    res = estimate_relative_pose(K, K, ua, ub, seed=7)
    assert np.array_equal(res.inlier_mask, planted)
    assert rotation_angle(res.model.R @ Pb.R.T) < 1e-6


def test_relative_pose_scale_invariant():
    rng = np.random.default_rng(4)
    X, Pb, ua, ub = _two_view(40, rng)
    noise = rng.normal(scale=0.3, size=ub.shape)
    r1 = estimate_relative_pose(K, K, ua, ub + noise, seed=0)
    X2, Pb2, ua2, ub2 = _two_view(40, np.random.default_rng(4), scale=7.5)
    r2 = estimate_relative_pose(K, K, ua2, ub2 + noise, seed=0)
    assert rotation_angle(r1.model.R @ r2.model.R.T) < 1e-6
    assert _dir_err(r1.model.t, r2.model.t) < 1e-6


def test_relative_pose_reproducible():
    rng = np.random.default_rng(5)
    X, Pb, ua, ub = _two_view(60, rng)
    ub = ub + rng.normal(scale=0.5, size=ub.shape)
    a = estimate_relative_pose(K, K, ua, ub, seed=3)
    b = estimate_relative_pose(K, K, ua, ub, seed=3)
    assert np.array_equal(a.model.matrix, b.model.matrix)
    assert np.array_equal(a.inlier_mask, b.inlier_mask)


def test_relative_pose_needs_eight():
    with pytest.raises(InsufficientMatches):
        estimate_relative_pose(K, K, np.zeros((7, 2)), np.zeros((7, 2)))


def _pnp_scene(n, rng):
    X = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n), rng.uniform(4, 8, n)])
    P = PoseSE3.from_Rt(Rotation.from_rotvec([0.05, -0.3, 0.1]).as_matrix(), np.array([0.5, -0.2, 0.4]))
    uv, _ = project_points(K, P, X)
    return X, P, uv


def test_absolute_pose_noiseless():
    X, P, uv = _pnp_scene(20, np.random.default_rng(6))
    res = estimate_absolute_pose(K, uv, X, seed=0)
    assert res.success and res.inlier_count == 20
    assert rotation_angle(res.model.R @ P.R.T) < 1e-6
    assert np.linalg.norm(res.model.t - P.t) < 1e-6


def test_absolute_pose_needs_four():
    with pytest.raises(InsufficientMatches):
        estimate_absolute_pose(K, np.zeros((3, 2)), np.zeros((3, 3)))


def test_absolute_pose_planted_outliers():
    rng = np.random.default_rng(7)
    X, P, uv = _pnp_scene(100, rng)
    uv = uv + rng.normal(scale=0.5, size=uv.shape)
    out = rng.permutation(100)[:30]
    uv[out] += rng.uniform(30, 80, size=(30, 2)) * rng.choice([-1, 1], size=(30, 2))
    planted = np.ones(100, dtype=bool)
    planted[out] = False
    res = estimate_absolute_pose(K, uv, X, seed=1)
    assert np.array_equal(res.inlier_mask, planted)
    assert np.degrees(rotation_angle(res.model.R @ P.R.T)) < 0.1


def test_triangulate_two_views_exact():
    rng = np.random.default_rng(8)
    X, Pb, ua, ub = _two_view(5, rng)
    for k in range(5):
        tri = triangulate([K, K], [PoseSE3.identity(), Pb], [ua[k], ub[k]])
        assert np.abs(tri.point - X[k]).max() < 1e-9
        assert not tri.low_parallax


def test_triangulate_identical_poses():
    tri = triangulate([K, K], [PoseSE3.identity(), PoseSE3.identity()], [np.array([100.0, 90.0])] * 2)
    assert tri.angle_rad == 0.0 and tri.low_parallax


def test_triangulate_three_views_noisy():
    rng = np.random.default_rng(9)
    poses = [PoseSE3.identity()]
    for a in (8.0, 16.0):
        r = np.deg2rad(a)
        R = Rotation.from_rotvec([0, -r, 0]).as_matrix()
        C = np.array([4 * np.sin(r), 0.0, 4 - 4 * np.cos(r)])
        poses.append(PoseSE3.from_Rt(R, -R @ C))
    sq = []
    for _ in range(200):
        X = np.array([rng.uniform(-1, 1), rng.uniform(-0.8, 0.8), rng.uniform(3.5, 4.5)])
        pix = [project_points(K, P, X)[0][0] + rng.normal(scale=0.5, size=2) for P in poses]
        tri = triangulate([K] * 3, poses, pix)
        for P, p in zip(poses, pix):
            sq.append(np.sum((project_points(K, P, tri.point)[0][0] - p) ** 2))
    assert np.sqrt(np.mean(sq) / 2) <= 1.5


def test_ransac_iteration_formula():
    # oracle: log(1 - p) / log(1 - w^s)
    n = ransac_iterations(0.5, 8, 0.9999, 10_000)
    assert n == int(np.ceil(np.log(1e-4) / np.log(1 - 0.5**8)))
    assert ransac_iterations(0.0, 8, 0.9999, 10_000) == 10_000
