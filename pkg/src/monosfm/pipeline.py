"""Incremental reconstruction controller."""
from __future__ import annotations

import logging
import zlib
from typing import Optional

import numpy as np

from .bundle import RefinementSchedule, alternate_refinement, plan_refinement, update_point_covariances
from .config import PipelineConfig
from .consistency import check_view
from .depth import scale_depth
from .errors import (DegenerateConfiguration, InitializationFailed, InsufficientMatches, NoConsensus,
                     NoRegistrableView, NoValidObservations)
from .estimation import (estimate_absolute_pose, estimate_relative_pose, normalized_coords,
                         triangulate_normalized)
from .geometry import PoseSE3, lift_pixels, project_points, sample_bilinear, triangulation_angle
from .graph import build_graph, next_view_candidates, rank_init_pairs
from .io import Scene
from .state import Frame, ReconstructionState

log = logging.getLogger(__name__)


def _seed(cfg: PipelineConfig, *keys: str) -> int:
    return (cfg.seed * 1_000_003 + zlib.crc32("|".join(keys).encode())) % (2**32)


def build_state(scene: Scene, config: Optional[PipelineConfig] = None) -> ReconstructionState:
    cfg = config or PipelineConfig()
    frames = {}
    for img in scene.images:
        frames[img] = Frame(img, scene.cameras[img], scene.keypoints[img],
                            np.asarray(scene.depth[img], dtype=float), np.asarray(scene.depth_sigma[img], dtype=float),
                            np.asarray(scene.normal[img], dtype=float), np.asarray(scene.normal_sigma[img], dtype=float))
    graph = build_graph(scene.keypoints, scene.matches)
    return ReconstructionState(frames, graph, cfg)


# ---------------------------------------------------------------------------
# structure helpers


def _reproj_ok(state, X: np.ndarray, obs) -> list:
    """Subset of observations (image, kp) that see X in front within max_reproj_px."""
    keep = []
    for img, kp in obs:
        f = state.frames[img]
        uv, z = project_points(f.K, f.pose, X[None])
        if z[0] > 0 and np.linalg.norm(uv[0] - f.keypoints[kp, :2]) <= state.config.max_reproj_px:
            keep.append((img, kp))
    return keep


def _lift_one(state, img: str, kp: int) -> Optional[np.ndarray]:
    f = state.frames[img]
    uv = f.keypoints[kp:kp + 1, :2]
    d = sample_bilinear(f.depth_refined, uv)[0]
    if not (np.isfinite(d) and d > 0):
        return None
    return lift_pixels(f.K, f.pose, uv, np.array([d]))[0]


def extend_tracks(state, img: str) -> int:
    """Create points for tracks that now have two or more registered
    observations but no point: triangulated when the baseline allows,
    otherwise lifted from img's depth (unless lifting is disabled)."""
    cfg = state.config
    f = state.frames[img]
    g = state.graph
    created = 0
    for kp in range(len(f.keypoints)):
        if f.kp_point[kp] >= 0 or state.point_for_keypoint(img, kp) >= 0:
            continue
        others = [(o, k) for o, k in g.tracks[int(g.track_of[img][kp])]
                  if o != img and state.frames[o].registered and state.frames[o].kp_point[k] < 0]
        if not others:
            continue
        obs = [(img, kp)] + others
        poses = [state.frames[o].pose for o, _ in obs]
        xs = [normalized_coords(state.frames[o].K, state.frames[o].keypoints[k:k + 1, :2]) for o, k in obs]
        X = triangulate_normalized(poses, xs)[0]
        angle = 0.0
        if np.all(np.isfinite(X)):
            cs = [p.center for p in poses]
            angle = max(float(triangulation_angle(cs[0], c, X)[0]) for c in cs[1:])
        keep = _reproj_ok(state, X, obs) if np.all(np.isfinite(X)) else []
        if angle >= np.deg2rad(cfg.min_tri_angle_deg) and len(keep) >= 2 and (img, kp) in keep:
            state.add_point(X, keep, "triangulated")
            created += 1
        elif not cfg.no_lifting:
            Xl = _lift_one(state, img, kp)
            if Xl is None:
                continue
            keep = [(img, kp)] + [o for o in _reproj_ok(state, Xl, others)]
            state.add_point(Xl, keep, "lifted")
            created += 1
    return created


def lift_remaining(state, img: str) -> int:
    """Lift keypoints of img whose tracks carry no point, lowest prior sigma first."""
    cfg = state.config
    if cfg.no_lifting:
        return 0
    f = state.frames[img]
    free = np.array([kp for kp in range(len(f.keypoints))
                     if f.kp_point[kp] < 0 and state.point_for_keypoint(img, kp) < 0], dtype=int)
    if not len(free):
        return 0
    uv = f.keypoints[free, :2]
    d = sample_bilinear(f.depth_refined, uv)
    s = sample_bilinear(f.depth_sigma, uv)
    ok = np.isfinite(d) & (d > 0) & np.isfinite(s)
    free, uv, d, s = free[ok], uv[ok], d[ok], s[ok]
    already = sum(1 for p in f.kp_point if p >= 0 and state.points[int(p)].provenance == "lifted"
                  and len(state.points[int(p)].track) == 1)
    budget = max(cfg.lift_budget - already, 0)
    order = np.lexsort((free, s))[:budget]
    X = lift_pixels(f.K, f.pose, uv[order], d[order])
    for k, x in zip(free[order], X):
        state.add_point(x, [(img, int(k))], "lifted")
    return len(order)


def _point_depths(state, img: str, pids, uv):
    f = state.frames[img]
    X = np.array([state.points[p].position for p in pids])
    return X @ f.pose.R[2] + f.pose.t[2]


def _scale_frame(state, img: str) -> float:
    """Median-ratio scale from the image's current (inlier) observations."""
    f = state.frames[img]
    kps = np.flatnonzero(f.kp_point >= 0)
    pids = [int(f.kp_point[k]) for k in kps]
    uv = f.keypoints[kps, :2]
    z = _point_depths(state, img, pids, uv)
    s = scale_depth(f.prior_depth, uv, z)
    f.apply_scale(s, state.config)
    return s


def _refine(state, schedule: RefinementSchedule):
    rep = alternate_refinement(state, schedule)
    cfg = state.config
    for img in rep.refined:
        state.log("refine", img)
    for img in rep.skipped:
        state.log("refine_skip", img)
    for img in rep.rejected:
        state.log("refine_keep", img)
    if cfg.no_depth_refinement:
        for img in schedule.images:
            state.log("refine_identity", img)
    state.log("bundle", detail=f"mode={schedule.mode} images={len(schedule.images)} removed={rep.removed} "
                               f"objective={rep.objective[-1]:.6g}")
    return rep


# ---------------------------------------------------------------------------
# initialization


def _init_pose(state, a: str, b: str):
    """Relative pose of b w.r.t. a (a at identity) and the inlier match rows."""
    cfg = state.config
    fa, fb = state.frames[a], state.frames[b]
    m = state.graph.matches_between(a, b)
    ia, ib = m[:, 0].astype(int), m[:, 1].astype(int)
    pa, pb = fa.keypoints[ia, :2], fb.keypoints[ib, :2]
    rel = None
    try:
        rel = estimate_relative_pose(fa.K, fb.K, pa, pb, cfg.essential_inlier_px, cfg.min_init_inliers,
                                     cfg.min_init_parallax_deg, cfg.ransac_confidence, cfg.ransac_max_iters,
                                     _seed(cfg, "init", a, b))
    except (InsufficientMatches, DegenerateConfiguration) as e:
        state.log("init_relative_fail", f"{a},{b}", str(e))
    if rel is not None and rel.success and rel.stable:
        return "relative", rel.model, np.flatnonzero(rel.inlier_mask), ia, ib
    if rel is not None:
        state.log("init_unstable", f"{a},{b}", f"parallax={rel.parallax_deg:.3f}")
    if not cfg.init_pnp_fallback:
        return None
    d = sample_bilinear(fa.prior_depth, pa)
    ok = np.flatnonzero(np.isfinite(d) & (d > 0))
    if len(ok) < cfg.min_init_inliers:
        return None
    X = lift_pixels(fa.K, PoseSE3.identity(), pa[ok], d[ok])
    try:
        res = estimate_absolute_pose(fb.K, pb[ok], X, None, cfg.pnp_inlier_px, cfg.min_init_inliers,
                                     cfg.ransac_confidence, cfg.ransac_max_iters, _seed(cfg, "init_pnp", a, b))
    except (InsufficientMatches, NoConsensus) as e:
        state.log("init_pnp_fail", f"{a},{b}", str(e))
        return None
    if not res.success:
        state.log("init_pnp_fail", f"{a},{b}", f"inliers={res.inlier_count}")
        return None
    return "pnp", res.model, ok[res.inlier_mask], ia, ib


def _init_structure(state, a: str, b: str, branch: str, inl, ia, ib) -> int:
    cfg = state.config
    fa, fb = state.frames[a], state.frames[b]
    pa, pb = fa.keypoints[ia[inl], :2], fb.keypoints[ib[inl], :2]
    X = triangulate_normalized([fa.pose, fb.pose], [normalized_coords(fa.K, pa), normalized_coords(fb.K, pb)])
    finite = np.all(np.isfinite(X), axis=1)
    Xs = np.where(finite[:, None], X, 0.0)
    za = Xs @ fa.pose.R[2] + fa.pose.t[2]
    zb = Xs @ fb.pose.R[2] + fb.pose.t[2]
    ang = triangulation_angle(fa.pose.center, fb.pose.center, Xs)
    high = finite & (za > 0) & (zb > 0) & (ang >= np.deg2rad(cfg.min_tri_angle_deg))
    if branch == "pnp":
        s_a = 1.0
    else:
        if not high.any():
            return 0
        s_a = scale_depth(fa.prior_depth, pa[high], za[high])
    fa.apply_scale(s_a, cfg)
    created = 0
    for k in range(len(inl)):
        obs = [(a, int(ia[inl[k]])), (b, int(ib[inl[k]]))]
        if state.point_for_keypoint(a, obs[0][1]) >= 0 or state.point_for_keypoint(b, obs[1][1]) >= 0:
            continue
        if high[k]:
            keep = _reproj_ok(state, X[k], obs)
            if len(keep) == 2:
                state.add_point(X[k], keep, "triangulated")
                created += 1
        elif not cfg.no_lifting:
            Xl = _lift_one(state, a, obs[0][1])
            if Xl is None:
                continue
            keep = [obs[0]] + _reproj_ok(state, Xl, obs[1:])
            state.add_point(Xl, keep, "lifted")
            created += 1
    if created:
        for img in (a, b):
            _scale_frame(state, img)
    return created


def initialize(state) -> ReconstructionState:
    cfg = state.config
    for a, b in rank_init_pairs(state.graph):
        if state.graph.inlier_counts[(a, b)] < cfg.min_init_inliers:
            continue
        got = _init_pose(state, a, b)
        if got is None:
            continue
        branch, T_ba, inl, ia, ib = got
        snap = state.snapshot()
        state.frames[a].pose = PoseSE3.identity()
        state.frames[b].pose = T_ba
        state.registered = [a, b]
        state.gauge = a
        try:
            created = _init_structure(state, a, b, branch, inl, ia, ib)
        except NoValidObservations:
            created = 0
        if created < cfg.min_reg_inliers:
            state.log("init_reject", f"{a},{b}", f"points={created}")
            _rollback(state, snap)
            continue
        state.frames[a].num_inliers = state.frames[b].num_inliers = len(inl)
        state.log("init_pair", f"{a},{b}", f"branch={branch} inliers={len(inl)} points={created}")
        _refine(state, RefinementSchedule("global", [a, b], cfg.alternation_rounds,
                                          cfg.local_window, cfg.growth_ratio))
        if not cfg.no_consistency_check:
            res = check_view(state, b)
            if not res.accepted:
                beta = res.ratios.get(a, 0.0)
                state.log("init_reject", f"{a},{b}", f"consistency beta={beta:.4f}")
                _rollback(state, snap)
                continue
        extend_tracks(state, a)
        extend_tracks(state, b)
        lift_remaining(state, a)
        lift_remaining(state, b)
        state.last_global = (len(state.registered), len(state.points))
        return state
    raise InitializationFailed("no image pair produced a stable, consistent initialization")


def _rollback(state, snap):
    state.restore(snap)
    if not state.registered:
        state.gauge = None


# ---------------------------------------------------------------------------
# registration


def _correspondences(state, c: str):
    cfg = state.config
    f = state.frames[c]
    kps, pids = [], []
    for kp in range(len(f.keypoints)):
        pid = state.point_for_keypoint(c, kp)
        if pid < 0:
            continue
        if cfg.no_lifting and state.points[pid].provenance == "lifted":
            continue
        kps.append(kp)
        pids.append(pid)
    return np.array(kps, dtype=int), pids


def register_next(state) -> str:
    cfg = state.config
    has_point = {i: state.frames[i].kp_point >= 0 for i in state.registered}
    cands = [c for c in next_view_candidates(state.graph, state.registered, cfg.next_view_score, has_point)
             if c not in state.rejected]
    for c in cands[:cfg.candidate_retries]:
        f = state.frames[c]
        kps, pids = _correspondences(state, c)
        if len(kps) < cfg.min_reg_inliers:
            state.log("register_fail", c, f"correspondences={len(kps)}")
            continue
        update_point_covariances(state, sorted(set(pids)))
        X = np.array([state.points[p].position for p in pids])
        var = np.array([np.trace(state.points[p].covariance) / 3 for p in pids])
        try:
            res = estimate_absolute_pose(f.K, f.keypoints[kps, :2], X, var, cfg.pnp_inlier_px, cfg.min_reg_inliers,
                                         cfg.ransac_confidence, cfg.ransac_max_iters,
                                         _seed(cfg, "register", c, str(len(state.registered))))
        except (InsufficientMatches, NoConsensus) as e:
            state.log("register_fail", c, str(e))
            continue
        if not res.success:
            state.log("register_fail", c, f"inliers={res.inlier_count}")
            continue
        snap = state.snapshot()
        f.pose = res.model
        state.registered.append(c)
        for k in np.flatnonzero(res.inlier_mask):
            state.add_observation(pids[k], c, int(kps[k]))
        f.num_inliers = int(res.inlier_count)
        try:
            _scale_frame(state, c)
        except NoValidObservations:
            state.log("register_fail", c, "no valid prior depth at inliers")
            _rollback(state, snap)
            continue
        extend_tracks(state, c)
        lift_remaining(state, c)
        _refine(state, plan_refinement(state, c))
        if not cfg.no_consistency_check:
            chk = check_view(state, c)
            if not chk.accepted:
                worst = max(chk.conflicts, key=lambda i: chk.ratios[i])
                state.log("reject", c, f"conflict={worst} beta={chk.ratios[worst]:.4f}")
                _rollback(state, snap)
                state.rejected.add(c)
                continue
        state.log("register", c, f"inliers={f.num_inliers}")
        return c
    raise NoRegistrableView("no candidate could be registered")


def final_sweep(state) -> list:
    """Consistency check over every registered view, newest first."""
    removed = []
    for c in list(reversed(state.registered)):
        if len(state.registered) <= 2:
            break
        chk = check_view(state, c)
        if not chk.accepted:
            worst = max(chk.conflicts, key=lambda i: chk.ratios[i])
            state.log("deregister", c, f"conflict={worst} beta={chk.ratios[worst]:.4f}")
            state.deregister(c)
            removed.append(c)
    return removed


def reconstruct(scene: Scene, config: Optional[PipelineConfig] = None) -> ReconstructionState:
    state = build_state(scene, config)
    cfg = state.config
    try:
        initialize(state)
    except InitializationFailed as e:
        state.status = "FAILED"
        state.log("init_failed", detail=str(e))
        return state
    while True:
        try:
            register_next(state)
        except NoRegistrableView:
            break
    _refine(state, RefinementSchedule("global", list(state.registered), cfg.alternation_rounds,
                                      cfg.local_window, cfg.growth_ratio))
    if not cfg.no_consistency_check:
        final_sweep(state)
    if len(state.registered) < len(state.frames):
        state.status = "PARTIAL"
    state.log("done", detail=f"registered={len(state.registered)}/{len(state.frames)} points={len(state.points)}")
    return state
