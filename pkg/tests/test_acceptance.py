"""End-to-end acceptance criteria; each test records one PASS/FAIL summary line."""
import time
from dataclasses import replace

import numpy as np
import pytest

import monosfm.pipeline as pipeline
from monosfm.cli import main
from monosfm.config import PipelineConfig
from monosfm.depth import (DepthAnchors, calibrate_depth_uncertainty, central_residual, normal_to_spherical,
                           propagate_normal_uncertainty, refine_depth, spherical_to_normal)
from monosfm.evaluate import auc, evaluate_poses, pairwise_errors
from monosfm.geometry import (CameraIntrinsics, PoseSE3, camera_depth, lift, lift_pixels, point_depth_covariance,
                              project, project_points, rotation_angle, sample_bilinear, so3_exp)
from monosfm.synth import generate, get_preset, write_synth


def _config(**kw):
    cfg = PipelineConfig()
    for k, v in kw.items():
        cfg.set(k, str(v))
    return cfg


def _run(preset, **cfg):
    res = generate(preset, 0)
    t0 = time.perf_counter()
    state = pipeline.reconstruct(res.scene, _config(**cfg))
    return res, state, time.perf_counter() - t0


def _auc5(gt, state, restrict=False):
    est = {i: state.frames[i].pose for i in state.registered}
    ref = {k: gt[k] for k in est} if restrict else gt
    return evaluate_poses(ref, est, [5.0])[5.0]


def _events(state, kind):
    return [e for e in state.events if e.kind == kind]


# 1 ------------------------------------------------------------------------------


def test_c1_geometry_round_trips(criterion):
    with criterion(1, "geometry round-trips") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        K = CameraIntrinsics(500.0, 480.0, 320.0, 240.0, 640, 480)
        worst = 0.0
        # 100 random poses x 100 random pixels and depths
        for _ in range(100):
            P = PoseSE3.from_Rt(so3_exp(rng.normal(size=3)), rng.normal(size=3))
            x = rng.uniform([0, 0], [639, 479], size=(100, 2))
            d = rng.uniform(0.1, 50.0, 100)
            uv, z = project_points(K, P, lift_pixels(K, P, x, d))
            worst = max(worst, np.abs(uv - x).max(), np.abs(z - d).max())
        X = lift(K, P, x[0], d[0])
        worst = max(worst, np.abs(project(K, P, X) - x[0]).max(), abs(camera_depth(P, X) - d[0]))
        a, b, c = (PoseSE3.from_Rt(so3_exp(rng.normal(size=3)), rng.normal(size=3)) for _ in range(3))
        assoc = np.abs(a.compose(b).compose(c).matrix - a.compose(b.compose(c)).matrix).max()
        inv = np.abs(a.compose(a.inverse()).matrix - np.eye(4)[:3]).max()
        ident = np.abs(a.compose(PoseSE3.identity()).matrix - a.matrix).max()
        dt = time.perf_counter() - t0
        info["detail"] = f"max err {worst:.1e}, axioms {max(assoc, inv, ident):.1e}, {dt:.2f}s"
        assert worst < 1e-9
        assert max(assoc, inv, ident) < 1e-12
        assert dt < 1.0


# 2 ------------------------------------------------------------------------------


def test_c2_jacobians_and_uncertainty(criterion):
    with criterion(2, "normal-uncertainty Jacobians and depth covariance") as info:
        t0 = time.perf_counter()
        K = CameraIntrinsics(200.0, 210.0, 120.0, 90.0, 240, 180)
        rng = np.random.default_rng(0)
        H, W = K.height, K.width
        theta = rng.uniform(0.3, 1.2, (H, W))
        phi = rng.uniform(-np.pi, np.pi, (H, W))
        N = spherical_to_normal(theta, phi)
        s = np.stack([rng.uniform(0.01, 0.1, (H, W)), rng.uniform(0.01, 0.1, (H, W))], axis=-1)
        du = rng.normal(scale=0.01, size=(H, W))
        dv = rng.normal(scale=0.01, size=(H, W))
        m = propagate_normal_uncertainty(N, s, K, du, dv, floor=0.0)
        worst = 0.0
        h = 1e-6
        for y, x in zip(rng.integers(0, H, 100), rng.integers(0, W, 100)):
            th, ph = normal_to_spherical(N[y, x])
            J = np.zeros((2, 2))
            for k, (a, b) in enumerate(((h, 0.0), (0.0, h))):
                rp = np.array(central_residual(spherical_to_normal(th + a, ph + b), K, x, y, du[y, x], dv[y, x]))
                rm = np.array(central_residual(spherical_to_normal(th - a, ph - b), K, x, y, du[y, x], dv[y, x]))
                J[:, k] = (rp - rm) / (2 * h)
            S = np.diag(s[y, x] ** 2)
            worst = max(worst, abs(m.var_u[y, x] / (J[0] @ S @ J[0]) - 1), abs(m.var_v[y, x] / (J[1] @ S @ J[1]) - 1))

        P = PoseSE3.from_Rt(so3_exp([0.4, -0.3, 0.8]), [0.2, -0.1, 1.0])
        A = rng.normal(size=(3, 3))
        Sx = A @ A.T * 0.01
        draws = rng.multivariate_normal([0.3, 0.2, 3.0], Sx, size=200_000)
        mc = (draws @ P.R[2] + P.t[2]).var()
        rel_mc = abs(point_depth_covariance(P, Sx) / mc - 1)
        dt = time.perf_counter() - t0
        info["detail"] = f"FD rel err {worst:.1e} over 100 px, MC rel err {rel_mc:.3f}, {dt:.1f}s"
        assert worst < 1e-4
        assert rel_mc < 0.03
        assert dt < 30


# 3 ------------------------------------------------------------------------------


def _plane_depth(K, n, c):
    u, v = np.meshgrid(np.arange(K.width, dtype=float), np.arange(K.height, dtype=float))
    r = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    return c / (r @ n)


def test_c3_normal_integration(criterion):
    with criterion(3, "normal integration oracles at 64x64") as info:
        t0 = time.perf_counter()
        K = CameraIntrinsics(60.0, 60.0, 31.5, 31.5, 64, 64)
        n = np.array([0.3, -0.2, -1.0])
        n /= np.linalg.norm(n)
        D = _plane_depth(K, n, -3.0)
        N = np.broadcast_to(n, D.shape + (3,)).copy()
        model = propagate_normal_uncertainty(N, np.full(D.shape, 0.01), K)
        fixed = refine_depth(D, calibrate_depth_uncertainty(D, np.zeros_like(D)), model)
        fp_err = np.abs(fixed.depth - D).max()

        rng = np.random.default_rng(3)
        Dn = D * (1 + 0.05 * rng.standard_normal(D.shape))
        uv = rng.uniform(0, 63, (20, 2))
        anchors = DepthAnchors(uv, sample_bilinear(D, uv), np.full(20, 1e-4))
        res = refine_depth(Dn, calibrate_depth_uncertainty(Dn, np.zeros_like(Dn)), model, anchors)
        rmse = lambda x: np.sqrt(np.mean((x - D) ** 2))
        gain = rmse(Dn) / rmse(res.depth)

        S = np.where(np.arange(64)[None, :] < 32, 2.0, 3.0) * np.ones((64, 64))
        Nf = np.zeros((64, 64, 3))
        Nf[..., 2] = -1.0
        rng = np.random.default_rng(1)
        Sn = S * (1 + 0.05 * rng.standard_normal(S.shape))
        mf = propagate_normal_uncertainty(Nf, np.full(S.shape, 0.01), K)
        uv = rng.uniform(0, 63, (60, 2))
        uv = uv[(uv[:, 0] < 30.5) | (uv[:, 0] > 32.5)][:20]
        st = refine_depth(Sn, 0.05 * S, mf, DepthAnchors(uv, sample_bilinear(S, uv), np.full(20, 1e-4)))
        side = max(np.sqrt(np.mean((st.depth[:, :32] - 2.0) ** 2)), np.sqrt(np.mean((st.depth[:, 32:] - 3.0) ** 2)))
        dt = time.perf_counter() - t0
        info["detail"] = (f"fixed point {fp_err:.1e}, RMSE gain {gain:.1f}x, step side RMSE {side / 1.0:.2%}, "
                          f"{dt:.1f}s")
        assert fp_err < 1e-6
        assert gain >= 3.0
        assert side < 0.01 * 1.0
        assert dt < 60


# 4 ------------------------------------------------------------------------------


def test_c4_monotonicity(criterion, monkeypatch):
    with criterion(4, "LM steps and alternation objective monotone (orbit noisy, 3 rounds)") as info:
        reports = []
        orig = pipeline.alternate_refinement

        def spy(*a, **k):
            r = orig(*a, **k)
            reports.append(r)
            return r

        monkeypatch.setattr(pipeline, "alternate_refinement", spy)
        _, state, dt = _run("orbit-hi-overlap-noisy", alternation_rounds=3)
        bundles = [b for r in reports for b in r.bundles]
        lm_ok = all(all(y < x for x, y in zip(b.costs, b.costs[1:])) for b in bundles)
        alt_ok = all(all(y <= x for x, y in zip(r.objective, r.objective[1:])) for r in reports)
        rounds = max(len(r.objective) - 1 for r in reports)
        info["detail"] = f"{len(bundles)} LM solves, {len(reports)} alternations, max rounds {rounds}, {dt:.0f}s"
        assert bundles and lm_ok
        assert rounds >= 3 and alt_ok


# 5 ------------------------------------------------------------------------------


def test_c5_low_overlap(criterion):
    with criterion(5, "low-overlap chain: full 8/8, no-lifting <= 2/8") as info:
        res, state, dt = _run("chain-low-overlap-noisy")
        a5 = _auc5(res.poses_gt, state)
        _, off, dt_off = _run("chain-low-overlap-noisy", no_lifting=True)
        info["detail"] = (f"full {len(state.registered)}/8 AUC@5 {a5:.3f}, no-lifting {len(off.registered)}/8, "
                          f"{dt + dt_off:.0f}s")
        assert len(state.registered) == 8
        assert a5 >= 0.7
        assert len(off.registered) <= 2
        assert dt + dt_off < 300


# 6 ------------------------------------------------------------------------------


def test_c6_low_parallax(criterion):
    with criterion(6, "forward low-parallax: PnP initialization, relative-only fails") as info:
        res, state, dt = _run("forward-low-parallax-noisy")
        init = _events(state, "init_pair")
        a5 = _auc5(res.poses_gt, state)
        _, rel, dt_rel = _run("forward-low-parallax-noisy", init_pnp_fallback=False)
        info["detail"] = (f"init {init[0].detail.split()[0] if init else 'none'}, AUC@5 {a5:.3f}, "
                          f"relative-only status {rel.status}, {dt + dt_rel:.0f}s")
        assert init and "branch=pnp" in init[0].detail
        assert a5 >= 0.7
        assert _events(rel, "init_failed") and rel.status == "FAILED"
        assert dt + dt_rel < 120


# 7 ------------------------------------------------------------------------------


def test_c7_symmetry(criterion):
    with criterion(7, "symmetric decoy rejected with the check, accepted without") as info:
        res, on, dt = _run("symmetric-rooms-noisy")
        decoy = res.meta["decoy"]
        rej = [e for e in on.events if e.kind in ("reject", "deregister") and e.image == decoy]
        fields = dict(kv.split("=") for kv in rej[0].detail.split()) if rej else {}
        beta = float(fields.get("beta", "nan"))
        _, off, dt_off = _run("symmetric-rooms-noisy", no_consistency_check=True)
        gt = res.poses_gt
        err = np.degrees(rotation_angle(off.frames[decoy].pose.R @ gt[decoy].R.T)) if decoy in off.registered \
            else float("nan")
        a_on = _auc5(gt, on, restrict=True)
        a_off = _auc5(gt, off, restrict=True)
        info["detail"] = (f"on: rejected vs {fields.get('conflict')} beta {beta:.3f}, AUC@5 {a_on:.3f}; "
                          f"off: decoy error {err:.0f} deg, AUC@5 {a_off:.3f}; {dt + dt_off:.0f}s")
        # the decoy sits between the second and third orbit views
        assert rej and fields["conflict"] in ("img01", "img02")
        assert beta > PipelineConfig().consistency_beta
        assert decoy not in on.registered
        assert decoy in off.registered and err > 20.0
        assert a_off < 0.8 * a_on
        assert dt + dt_off < 120


# 8 ------------------------------------------------------------------------------


_SMALL = replace(get_preset("orbit-hi-overlap-noisy"), n_images=4)


def _trajectory(scene):
    st = pipeline.reconstruct(scene, PipelineConfig())
    poses = {i: st.frames[i].pose.matrix.tobytes() for i in st.registered}
    points = {p: v.position.tobytes() for p, v in st.points.items()}
    return poses, points, [e.line() for e in st.events]


def _scaled(scene, c, images):
    out = replace(scene, depth=dict(scene.depth), depth_sigma=dict(scene.depth_sigma))
    for img in images:
        out.depth[img] = scene.depth[img] * c
        out.depth_sigma[img] = scene.depth_sigma[img] * c
    return out


@pytest.fixture(scope="module")
def small_reference():
    res = generate(_SMALL, 0)
    return res.scene, _trajectory(res.scene)


def test_c8_depth_scaling(criterion, small_reference):
    with criterion(8, "prior scaling by c leaves the trajectory bit-identical (dyadic c)") as info:
        scene, ref = small_reference
        runs = {"all x2": _scaled(scene, 2.0, scene.images), "img01 x0.25": _scaled(scene, 0.25, ["img01"])}
        same = {k: _trajectory(s) == ref for k, s in runs.items()}
        info["detail"] = ", ".join(f"{k}: {'identical' if v else 'differs'}" for k, v in same.items())
        assert all(same.values())


@pytest.mark.xfail(strict=True, reason="non-dyadic factors round differently in the prior interpolation")
def test_c8_depth_scaling_non_dyadic(small_reference):
    scene, ref = small_reference
    assert _trajectory(_scaled(scene, 3.0, scene.images)) == ref


# 9 ------------------------------------------------------------------------------


def test_c9_determinism(criterion, tmp_path):
    with criterion(9, "reconstruct twice gives bit-identical poses.txt and points3D.txt") as info:
        write_synth(generate(_SMALL, 0), tmp_path / "scene")
        codes = [main(["reconstruct", "--scene", str(tmp_path / "scene"), "--out", str(tmp_path / f"run{k}"),
                       "--seed", "5"]) for k in (0, 1)]
        same = [(tmp_path / "run0" / f).read_bytes() == (tmp_path / "run1" / f).read_bytes()
                for f in ("poses.txt", "points3D.txt")]
        info["detail"] = f"exit codes {codes}, poses identical {same[0]}, points identical {same[1]}"
        assert codes == [0, 0]
        assert all(same)


# 10 -----------------------------------------------------------------------------


def test_c10_evaluator(criterion):
    with criterion(10, "evaluator examples and similarity invariance") as info:
        rng = np.random.default_rng(0)
        gt = {f"i{k}": PoseSE3.from_Rt(so3_exp(rng.normal(size=3)), rng.normal(size=3)) for k in range(6)}
        ident = evaluate_poses(gt, gt, [1, 5, 20])
        # one pair with a 2.5 degree rotation about its baseline
        two = {k: gt[k] for k in ("i0", "i1")}
        rel = two["i1"].compose(two["i0"].inverse())
        R = so3_exp(np.deg2rad(2.5) * rel.t / np.linalg.norm(rel.t)) @ rel.R
        est2 = {"i0": two["i0"], "i1": PoseSE3.from_Rt(R, rel.t).compose(two["i0"])}
        half = evaluate_poses(two, est2, [5.0])[5.0]
        piece = auc([0.5, 2.0, 30.0], 5.0)

        est = {k: PoseSE3.from_Rt(so3_exp(0.03 * rng.normal(size=3)) @ P.R, P.t + 0.05 * rng.normal(size=3))
               for k, P in gt.items()}
        ref = pairwise_errors(gt, est)
        worst = 0.0
        for _ in range(100):
            s = float(rng.uniform(0.1, 10))
            Rs = so3_exp(rng.normal(size=3))
            t = rng.normal(size=3) * 5
            moved = {k: PoseSE3.from_Rt(P.R @ Rs, (P.R @ t + P.t) / s) for k, P in est.items()}
            got = pairwise_errors(gt, moved)
            worst = max(worst, max(abs(got[k] - ref[k]) for k in ref))
        info["detail"] = f"identity {ident[5.0]}, half {half:.12f}, piecewise {piece}, invariance {worst:.1e}"
        assert all(v == 1.0 for v in ident.values())
        assert abs(half - 0.5) < 1e-10
        assert abs(piece - 0.5) < 1e-15
        assert worst < 1e-9
