"""Bundle adjustment with depth anchors, the depth/bundle alternation,
point filtering and local/global scheduling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.sparse as sp

from .depth import DepthAnchors, RefineConfig, refine_depth, refinement_terms, should_skip_refinement
from .errors import SingularSystem, ValidationError
from .geometry import CameraIntrinsics, PoseSE3, sample_bilinear, skew, triangulation_angle
from .losses import Cauchy, TruncatedSmoothL1

__all__ = [
    "BundleProblem", "BundleReport", "solve_bundle", "RefinementSchedule", "AlternationReport",
    "build_bundle_problem", "alternate_refinement", "filter_points", "plan_refinement",
    "joint_objective", "update_point_covariances",
]


@dataclass
class BundleProblem:
    """Reprojection residuals plus depth anchors over a set of poses and points.

    Observations and anchors are parallel arrays; `obs_image` / `anc_image`
    hold image ids and `obs_point` / `anc_point` point ids. Anchor targets are
    the refined depth sampled at the observation, held fixed during the solve.
    Images in `variable_scales` also get a free multiplicative scale k on
    their anchors (residual z - k d with variance k^2 var); the solved values
    are written to `scales`.
    """

    cameras: Dict[str, CameraIntrinsics]
    poses: Dict[str, PoseSE3]
    points: Dict[int, np.ndarray]
    obs_image: Sequence[str]
    obs_point: Sequence[int]
    obs_uv: np.ndarray
    obs_sigma: np.ndarray
    variable_poses: Set[str]
    variable_points: Set[int]
    anc_image: Sequence[str] = ()
    anc_point: Sequence[int] = ()
    anc_depth: np.ndarray = field(default_factory=lambda: np.zeros(0))
    anc_var: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ba_loss: TruncatedSmoothL1 = field(default_factory=lambda: TruncatedSmoothL1(16.0))
    reg_loss: Cauchy = field(default_factory=lambda: Cauchy(0.05))
    reg_weight: float = 1.0
    max_iters: int = 100
    rel_tol: float = 1e-6
    variable_scales: Set[str] = field(default_factory=set)
    scales: Dict[str, float] = field(default_factory=dict)

    def validate(self):
        if not set(self.poses) - set(self.variable_poses):
            raise ValidationError("bundle problem needs at least one fixed pose")
        observed = set(int(p) for p in self.obs_point) | set(int(p) for p in self.anc_point)
        missing = set(self.variable_points) - observed
        if missing:
            raise ValidationError(f"variable points without residuals: {sorted(missing)[:5]}")
        if len(self.obs_image) != len(self.obs_uv) or len(self.obs_uv) != len(self.obs_sigma):
            raise ValidationError("observation arrays differ in length")


@dataclass
class BundleReport:
    iterations: int
    accepted: int
    initial_cost: float
    final_cost: float
    costs: List[float]
    converged: bool

    @property
    def not_converged(self) -> bool:
        return not self.converged


class _Layout:
    """Index bookkeeping between ids and parameter/observation arrays."""

    def __init__(self, prob: BundleProblem):
        self.pose_ids = sorted(prob.poses)
        self.pose_idx = {k: i for i, k in enumerate(self.pose_ids)}
        self.var_pose = [k for k in self.pose_ids if k in prob.variable_poses]
        self.var_pose_col = {k: 6 * i for i, k in enumerate(self.var_pose)}
        self.point_ids = sorted(prob.points)
        self.point_idx = {k: i for i, k in enumerate(self.point_ids)}
        self.var_point = [k for k in self.point_ids if k in prob.variable_points]
        counts: Dict[str, int] = {}
        for k in prob.anc_image:
            counts[k] = counts.get(k, 0) + 1
        # a scale needs a few anchors to be observable
        self.var_scale = [k for k in self.pose_ids if k in prob.variable_scales and counts.get(k, 0) >= 3] \
            if prob.reg_weight else []
        self.var_scale_col = {k: 6 * len(self.var_pose) + i for i, k in enumerate(self.var_scale)}
        nc = 6 * len(self.var_pose) + len(self.var_scale)
        self.nc = nc
        self.var_point_col = {k: nc + 3 * i for i, k in enumerate(self.var_point)}
        self.n = nc + 3 * len(self.var_point)

        def arrays(images, pids):
            ci = np.array([self.pose_idx[k] for k in images], dtype=int)
            pi = np.array([self.point_idx[int(k)] for k in pids], dtype=int)
            pc = np.array([self.var_pose_col.get(k, -1) for k in images], dtype=int)
            xc = np.array([self.var_point_col.get(int(k), -1) for k in pids], dtype=int)
            return ci, pi, pc, xc

        self.o_cam, self.o_pt, self.o_pcol, self.o_xcol = arrays(prob.obs_image, prob.obs_point)
        self.a_cam, self.a_pt, self.a_pcol, self.a_xcol = arrays(prob.anc_image, prob.anc_point)
        self.a_scol = np.array([self.var_scale_col.get(k, -1) for k in prob.anc_image], dtype=int)
        K = [prob.cameras[k] for k in self.pose_ids]
        self.f = np.array([[c.fx, c.fy] for c in K]).reshape(-1, 2)
        self.c = np.array([[c.cx, c.cy] for c in K]).reshape(-1, 2)


def _stack(prob: BundleProblem, lay: _Layout):
    R = np.array([prob.poses[k].R for k in lay.pose_ids]).reshape(-1, 3, 3)
    t = np.array([prob.poses[k].t for k in lay.pose_ids]).reshape(-1, 3)
    X = np.array([prob.points[k] for k in lay.point_ids], dtype=float).reshape(-1, 3)
    k = np.array([prob.scales.get(i, 1.0) for i in lay.pose_ids], dtype=float)
    return R, t, X, k


def _evaluate(prob: BundleProblem, lay: _Layout, params, jac: bool):
    """Residuals, robust cost and (optionally) weighted Jacobian rows."""
    R, t, X, kscale = params
    # reprojection
    RX = np.einsum("nij,nj->ni", R[lay.o_cam], X[lay.o_pt])
    Xc = RX + t[lay.o_cam]
    z = Xc[:, 2]
    ok = z > 0
    zs = np.where(ok, z, 1.0)
    f = lay.f[lay.o_cam]
    proj = f * Xc[:, :2] / zs[:, None] + lay.c[lay.o_cam]
    sig = np.asarray(prob.obs_sigma, dtype=float)
    e = (proj - prob.obs_uv) / sig[:, None]
    s = np.where(ok, (e**2).sum(axis=1), np.inf)
    cap = float(prob.ba_loss.rho(np.array(prob.ba_loss.s_max)))
    rho_ba = np.where(ok, prob.ba_loss.rho(np.where(ok, s, 0.0)), cap)
    # depth anchors
    aRX = np.einsum("nj,nj->n", R[lay.a_cam][:, 2], X[lay.a_pt]) if len(lay.a_cam) else np.zeros(0)
    za = aRX + t[lay.a_cam][:, 2] if len(lay.a_cam) else np.zeros(0)
    ka = kscale[lay.a_cam]
    ra = za - ka * prob.anc_depth
    rho_reg = prob.reg_weight * prob.reg_loss.rho(ra**2) / (ka**2 * prob.anc_var) if prob.reg_weight \
        else np.zeros_like(ra)
    cost = float(rho_ba.sum() + rho_reg.sum())
    if not jac:
        return cost, None
    w = np.where(ok, prob.ba_loss.weight(np.where(ok, s, 0.0)), 0.0)
    sw = np.sqrt(w)
    # d(proj)/d(Xc), whitened
    A = np.zeros((len(z), 2, 3))
    A[:, 0, 0] = f[:, 0] / zs
    A[:, 0, 2] = -f[:, 0] * Xc[:, 0] / zs**2
    A[:, 1, 1] = f[:, 1] / zs
    A[:, 1, 2] = -f[:, 1] * Xc[:, 1] / zs**2
    A *= (sw / sig)[:, None, None]
    Jw = -np.einsum("nij,njk->nik", A, skew_batch(RX))
    Jt = A
    Jx = np.einsum("nij,njk->nik", A, R[lay.o_cam])
    rw = e * sw[:, None]

    rows, cols, vals = [], [], []
    m = len(z)
    base = np.arange(m) * 2
    for comp in range(2):
        r_idx = base + comp
        sel = lay.o_pcol >= 0
        for k in range(3):
            rows.append(r_idx[sel]); cols.append(lay.o_pcol[sel] + k); vals.append(Jw[sel, comp, k])
            rows.append(r_idx[sel]); cols.append(lay.o_pcol[sel] + 3 + k); vals.append(Jt[sel, comp, k])
        sel = lay.o_xcol >= 0
        for k in range(3):
            rows.append(r_idx[sel]); cols.append(lay.o_xcol[sel] + k); vals.append(Jx[sel, comp, k])
    res = [rw.ravel()]
    if len(ra) and prob.reg_weight:
        # whitened residual (z / k - d) sqrt(w / var): the same cost to second order
        wa = np.sqrt(prob.reg_weight * prob.reg_loss.weight(ra**2) / prob.anc_var) / ka
        r3 = R[lay.a_cam][:, 2]
        aRXv = np.einsum("nij,nj->ni", R[lay.a_cam], X[lay.a_pt])
        # dz/domega = -(e3^T [RX]x), dz/dt = e3, dz/dX = r3
        dzw = -skew_batch(aRXv)[:, 2, :]
        ra_rows = 2 * m + np.arange(len(ra))
        sel = lay.a_pcol >= 0
        for k in range(3):
            rows.append(ra_rows[sel]); cols.append(lay.a_pcol[sel] + k); vals.append(wa[sel] * dzw[sel, k])
        rows.append(ra_rows[sel]); cols.append(lay.a_pcol[sel] + 5); vals.append(wa[sel])
        sel = lay.a_xcol >= 0
        for k in range(3):
            rows.append(ra_rows[sel]); cols.append(lay.a_xcol[sel] + k); vals.append(wa[sel] * r3[sel, k])
        sel = lay.a_scol >= 0
        rows.append(ra_rows[sel]); cols.append(lay.a_scol[sel]); vals.append(-wa[sel] * za[sel])
        res.append(wa * ra)
    r = np.concatenate(res)
    J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(r), lay.n))
    return cost, (J, r)


def skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def _apply(prob: BundleProblem, lay: _Layout, params, delta):
    from .geometry import so3_exp
    R, t, X, kscale = params
    R2, t2, X2, k2 = R.copy(), t.copy(), X.copy(), kscale.copy()
    for k in lay.var_pose:
        i, c = lay.pose_idx[k], lay.var_pose_col[k]
        R2[i] = so3_exp(delta[c:c + 3]) @ R[i]
        t2[i] = t[i] + delta[c + 3:c + 6]
    if lay.var_point:
        idx = np.array([lay.point_idx[k] for k in lay.var_point])
        X2[idx] = X[idx] + delta[lay.nc:].reshape(-1, 3)
    for k in lay.var_scale:
        i = lay.pose_idx[k]
        k2[i] = kscale[i] * np.exp(delta[lay.var_scale_col[k]])
    return R2, t2, X2, k2


def _solve_damped(H: sp.csr_matrix, g: np.ndarray, lam: float, nc: int) -> np.ndarray:
    """Solve (H + lam*diag(H)) dx = -g by eliminating the 3x3 point blocks."""
    n = H.shape[0]
    diag = np.maximum(np.asarray(H.diagonal()), 1e-12)
    A = (H + sp.diags(lam * diag + 1e-12 * diag.max())).tocsr()
    npnt = (n - nc) // 3
    if npnt == 0:
        return np.linalg.solve(A.toarray(), -g)
    blk = np.arange(npnt) * 3 + nc
    ii = (blk[:, None, None] + np.arange(3)[None, :, None]).repeat(3, axis=2)
    jj = (blk[:, None, None] + np.arange(3)[None, None, :]).repeat(3, axis=1)
    Hpp = np.asarray(A[ii.ravel(), jj.ravel()]).reshape(npnt, 3, 3)
    Hpp_inv = np.linalg.inv(Hpp)
    rows = ii.ravel() - nc
    cols = jj.ravel() - nc
    Pinv = sp.csr_matrix((Hpp_inv.ravel(), (rows, cols)), shape=(n - nc, n - nc))
    gp = g[nc:]
    if nc == 0:
        return -(Pinv @ gp)
    Hcc = A[:nc, :nc].toarray()
    Hcp = A[:nc, nc:]
    S = Hcc - (Hcp @ Pinv @ Hcp.T).toarray()
    rhs = -g[:nc] + Hcp @ (Pinv @ gp)
    dc = np.linalg.solve(S, rhs)
    dp = -(Pinv @ (gp + Hcp.T @ dc))
    return np.concatenate([dc, dp])


def solve_bundle(prob: BundleProblem) -> BundleReport:
    """Levenberg-Marquardt on the robustified cost; poses and points in
    `prob` are replaced by the best iterate. Accepted steps strictly
    decrease the cost."""
    prob.validate()
    lay = _Layout(prob)
    params = _stack(prob, lay)
    cost, (J, r) = _evaluate(prob, lay, params, jac=True)
    costs = [cost]
    init = cost
    if not np.isfinite(cost):
        raise SingularSystem("non-finite bundle cost at the initial state")
    lam = 1e-4
    it = accepted = 0
    converged = False
    # below this the cost is floating-point noise in the projections
    noise_floor = 1e-20 * (len(prob.obs_uv) + len(prob.anc_depth))
    while it < prob.max_iters:
        if lay.n == 0 or cost <= noise_floor:
            converged = True
            break
        H = (J.T @ J).tocsr()
        g = J.T @ r
        if np.max(np.abs(g)) < 1e-14 * max(1.0, cost):
            converged = True
            break
        it += 1
        try:
            delta = _solve_damped(H, g, lam, lay.nc)
        except np.linalg.LinAlgError:
            delta = None
        if delta is None or not np.all(np.isfinite(delta)):
            lam *= 10.0
            if lam > 1e16:
                raise SingularSystem("bundle normal equations are singular")
            continue
        trial = _apply(prob, lay, params, delta)
        new_cost, _ = _evaluate(prob, lay, trial, jac=False)
        if np.isfinite(new_cost) and new_cost < cost:
            rel = (cost - new_cost) / cost
            params, cost = trial, new_cost
            costs.append(cost)
            accepted += 1
            lam = max(lam / 10.0, 1e-12)
            if rel < prob.rel_tol:
                converged = True
                break
            _, (J, r) = _evaluate(prob, lay, params, jac=True)
        else:
            lam *= 10.0
            if lam > 1e12:
                converged = True
                break
    R, t, X, kscale = params
    for k in lay.var_pose:
        i = lay.pose_idx[k]
        prob.poses[k] = PoseSE3.from_Rt(R[i], t[i])
    for k in lay.var_scale:
        prob.scales[k] = float(kscale[lay.pose_idx[k]])
    for k in lay.var_point:
        prob.points[k] = X[lay.point_idx[k]].copy()
    return BundleReport(it, accepted, init, cost, costs, converged)


# ---------------------------------------------------------------------------
# state-level operations


@dataclass
class RefinementSchedule:
    mode: str                       # "local" or "global"
    images: List[str]
    rounds: int = 2
    window: int = 5
    growth_ratio: float = 1.1

    def __post_init__(self):
        if self.rounds < 1:
            raise ValidationError("alternation needs at least one round")
        if self.mode not in ("local", "global"):
            raise ValidationError(f"unknown schedule mode {self.mode!r}")


@dataclass
class AlternationReport:
    objective: List[float]
    refined: List[str]
    skipped: List[str]
    rejected: List[str]
    bundles: List[BundleReport]
    removed: int


def _anchor_var(state, frame, uv: np.ndarray) -> np.ndarray:
    if state.config.use_propagated_depth_cov and frame.refined_var is not None:
        return sample_bilinear(frame.refined_var, uv)
    return sample_bilinear(frame.depth_sigma, uv) ** 2


def build_bundle_problem(state, scope: Sequence[str], all_points: bool = False) -> BundleProblem:
    """Problem over images in `scope` and the points they observe; other
    registered images observing those points enter as fixed poses."""
    cfg = state.config
    scope = [i for i in scope if state.frames[i].registered]
    scope_set = set(scope)
    pids = []
    for pid, pt in state.points.items():
        if all_points or any(img in scope_set for img, _ in pt.track):
            pids.append(pid)
    obs_img, obs_pt, obs_uv, obs_sig = [], [], [], []
    for pid in sorted(pids):
        for img, kp in state.points[pid].track:
            f = state.frames[img]
            if not f.registered:
                continue
            obs_img.append(img)
            obs_pt.append(pid)
            obs_uv.append(f.keypoints[kp, :2])
            obs_sig.append(f.keypoints[kp, 2])
    poses = {img: state.frames[img].pose for img in set(obs_img) | scope_set}
    anc_img, anc_pt, anc_d, anc_v = [], [], [], []
    if not cfg.no_depth_reg and obs_img:
        uv_all = np.array(obs_uv)
        img_arr = np.array(obs_img, dtype=object)
        for img in sorted(set(obs_img)):
            f = state.frames[img]
            if f.depth_refined is None:
                continue
            sel = np.flatnonzero(img_arr == img)
            d = sample_bilinear(f.depth_refined, uv_all[sel])
            v = _anchor_var(state, f, uv_all[sel])
            ok = np.isfinite(d) & (d > 0) & np.isfinite(v) & (v > 0)
            for k in sel[ok]:
                anc_img.append(img)
                anc_pt.append(obs_pt[k])
            anc_d.append(d[ok])
            anc_v.append(v[ok])
    variable_poses = {i for i in scope if i != state.gauge}
    if not (set(poses) - variable_poses):
        # the scope holds every pose: keep the gauge (or the first image) fixed
        variable_poses.discard(state.gauge if state.gauge in poses else sorted(poses)[0])
    return BundleProblem(
        cameras={img: state.frames[img].K for img in poses},
        poses=dict(poses),
        points={pid: state.points[pid].position.copy() for pid in pids},
        obs_image=obs_img, obs_point=obs_pt,
        obs_uv=np.array(obs_uv).reshape(-1, 2), obs_sigma=np.array(obs_sig, dtype=float),
        variable_poses=variable_poses,
        variable_points=set(pids),
        anc_image=anc_img, anc_point=anc_pt,
        anc_depth=np.concatenate(anc_d) if anc_d else np.zeros(0),
        anc_var=np.concatenate(anc_v) if anc_v else np.zeros(0),
        ba_loss=TruncatedSmoothL1(cfg.ba_trunc_px2),
        reg_loss=Cauchy(cfg.reg_cauchy_scale),
        reg_weight=0.0 if cfg.no_depth_reg else 1.0,
        max_iters=cfg.ba_max_iters,
        rel_tol=cfg.ba_rel_tol,
        variable_scales=set() if cfg.no_depth_reg else set(variable_poses),
    )


def _bundle_cost(state) -> float:
    if not state.points:
        return 0.0
    prob = build_bundle_problem(state, list(state.registered), all_points=True)
    lay = _Layout(prob)
    return _evaluate(prob, lay, _stack(prob, lay), jac=False)[0]


def _refine_config(cfg) -> RefineConfig:
    return RefineConfig(prior_trunc=cfg.prior_trunc, int_trunc=cfg.int_trunc, reg_scale=cfg.reg_cauchy_scale,
                        bilateral_k=cfg.bilateral_k, max_iters=cfg.refine_max_iters,
                        warmup_iters=cfg.refine_warmup_iters, rel_tol=cfg.refine_rel_tol, cg_rtol=cfg.cg_rtol)


def _image_int_cost(state, img: str, D: np.ndarray) -> float:
    f = state.frames[img]
    c_prior, c_int, _ = refinement_terms(D, f.depth_scaled, f.depth_sigma,
                                         f.normal_model(state.config.normal_var_floor),
                                         config=_refine_config(state.config))
    return c_prior + c_int


def _image_reg_cost(state, img: str, D: np.ndarray) -> float:
    """Depth-anchor cost of one image's observations with bundle weights."""
    cfg = state.config
    if cfg.no_depth_reg:
        return 0.0
    f = state.frames[img]
    pids, uv = _image_observations(state, img)
    if not len(pids):
        return 0.0
    X = np.array([state.points[p].position for p in pids])
    z = X @ f.pose.R[2] + f.pose.t[2]
    d = sample_bilinear(D, uv)
    v = _anchor_var(state, f, uv)
    ok = np.isfinite(d) & (d > 0) & np.isfinite(v) & (v > 0)
    loss = Cauchy(cfg.reg_cauchy_scale)
    return float((loss.rho((z[ok] - d[ok]) ** 2) / v[ok]).sum())


def _image_observations(state, img: str):
    f = state.frames[img]
    kps = np.flatnonzero(f.kp_point >= 0)
    pids = [int(f.kp_point[k]) for k in kps]
    return pids, f.keypoints[kps, :2]


def joint_objective(state) -> float:
    """C_BA + C_reg + sum of per-image prior and integration costs."""
    total = _bundle_cost(state)
    for img in state.registered:
        f = state.frames[img]
        if f.depth_refined is not None:
            total += _image_int_cost(state, img, f.depth_refined)
    return total


def update_point_covariances(state, pids: Optional[Sequence[int]] = None) -> None:
    """Inverse Gauss-Newton information of each point with poses held fixed."""
    cfg = state.config
    pids = list(state.points) if pids is None else list(pids)
    if not pids:
        return
    row = {pid: i for i, pid in enumerate(pids)}
    per_img: Dict[str, Tuple[list, list]] = {}
    for pid in pids:
        for img, kp in state.points[pid].track:
            if state.frames[img].registered:
                rows, kps = per_img.setdefault(img, ([], []))
                rows.append(row[pid])
                kps.append(kp)
    X = np.array([state.points[pid].position for pid in pids])
    H = np.zeros((len(pids), 3, 3))
    for img in sorted(per_img):
        f = state.frames[img]
        rows, kps = np.array(per_img[img][0]), np.array(per_img[img][1])
        R, t = f.pose.R, f.pose.t
        Xc = X[rows] @ R.T + t
        ok = Xc[:, 2] > 0
        rows, kps, Xc = rows[ok], kps[ok], Xc[ok]
        z = Xc[:, 2]
        J = np.zeros((len(rows), 2, 3))
        J[:, 0, 0] = f.K.fx / z
        J[:, 0, 2] = -f.K.fx * Xc[:, 0] / z**2
        J[:, 1, 1] = f.K.fy / z
        J[:, 1, 2] = -f.K.fy * Xc[:, 1] / z**2
        A = (J @ R) / f.keypoints[kps, 2][:, None, None]
        np.add.at(H, rows, np.einsum("nki,nkj->nij", A, A))
        if not cfg.no_depth_reg and f.depth_sigma is not None and f.depth_refined is not None:
            uv = f.keypoints[kps, :2]
            v = _anchor_var(state, f, uv)
            use = np.isfinite(v) & (v > 0) & np.isfinite(sample_bilinear(f.depth_refined, uv))
            np.add.at(H, rows[use], np.outer(R[2], R[2])[None] / v[use][:, None, None])
    for i, pid in enumerate(pids):
        scale = max(np.trace(H[i]), 1e-300)
        state.points[pid].covariance = np.linalg.inv(H[i] + 1e-12 * scale * np.eye(3))


def _refine_image(state, img: str, report: AlternationReport) -> None:
    cfg = state.config
    f = state.frames[img]
    model = f.normal_model(cfg.normal_var_floor)
    rcfg = _refine_config(cfg)
    pids, uv = _image_observations(state, img)
    if pids:
        X = np.array([state.points[p].position for p in pids])
        r3 = f.pose.R[2]
        depth = X @ r3 + f.pose.t[2]
        var = np.array([r3 @ state.points[p].covariance @ r3 for p in pids])
        anchors = DepthAnchors(uv, depth, var) if not cfg.no_depth_reg else DepthAnchors.empty()
    else:
        anchors = DepthAnchors.empty()
    from .depth import refinement_cost
    current = refinement_cost(f.depth_refined, f.depth_scaled, f.depth_sigma, model, anchors, rcfg)
    if f.last_refine_cost is not None and should_skip_refinement(f.last_refine_cost, current, cfg.skip_refinement_tol):
        report.skipped.append(img)
        return
    res = refine_depth(f.depth_scaled, f.depth_sigma, model, anchors, D_init=f.depth_refined, config=rcfg)
    old = _image_int_cost(state, img, f.depth_refined) + _image_reg_cost(state, img, f.depth_refined)
    new = _image_int_cost(state, img, res.depth) + _image_reg_cost(state, img, res.depth)
    if new <= old:
        f.depth_refined = res.depth
        f.refined_var = res.variance
        f.last_refine_cost = res.cost
        report.refined.append(img)
    else:
        # the refinement's anchor weights disagree with the joint objective; keep the block
        f.last_refine_cost = current
        report.rejected.append(img)


def alternate_refinement(state, schedule: RefinementSchedule) -> AlternationReport:
    """Block coordinate descent: depth maps with points fixed, then bundle
    with depth maps fixed, then filtering. The joint objective is recorded
    after every block and never increases."""
    cfg = state.config
    if len(state.registered) < 2:
        raise ValidationError("alternation needs at least two registered images")
    scope = state.registered if schedule.mode == "global" else [i for i in schedule.images if i in state.registered]
    report = AlternationReport([joint_objective(state)], [], [], [], [], 0)
    for _ in range(schedule.rounds):
        update_point_covariances(state)
        if not cfg.no_depth_refinement:
            for img in scope:
                _refine_image(state, img, report)
        prob = build_bundle_problem(state, scope)
        if prob.variable_points or prob.variable_poses:
            br = solve_bundle(prob)
            report.bundles.append(br)
            for img in prob.variable_poses:
                state.frames[img].pose = prob.poses[img]
            for pid in prob.variable_points:
                state.points[pid].position = prob.points[pid]
            for img, k in prob.scales.items():
                state.frames[img].rescale(k)
        report.removed += filter_points(state)
        report.objective.append(joint_objective(state))
    if schedule.mode == "global":
        state.last_global = (len(state.registered), len(state.points))
    return report


def _has_anchor(state, pid: int) -> bool:
    if state.config.no_depth_reg:
        return False
    for img, kp in state.points[pid].track:
        f = state.frames[img]
        if f.registered and f.depth_refined is not None:
            if np.isfinite(sample_bilinear(f.depth_refined, f.keypoints[kp:kp + 1, :2])[0]):
                return True
    return False


def filter_points(state) -> int:
    """Drop bad observations and points; returns the number of observations removed."""
    cfg = state.config
    removed = 0
    min_angle = np.deg2rad(cfg.min_tri_angle_deg)
    for pid in sorted(state.points):
        pt = state.points[pid]
        behind = False
        bad = []
        centers = []
        for img, kp in pt.track:
            f = state.frames[img]
            if not f.registered:
                continue
            Xc = f.pose.apply(pt.position)
            if not Xc[2] > 0:
                behind = True
                break
            uv = np.array([f.K.fx * Xc[0] / Xc[2] + f.K.cx, f.K.fy * Xc[1] / Xc[2] + f.K.cy])
            if np.linalg.norm(uv - f.keypoints[kp, :2]) > cfg.max_reproj_px:
                bad.append((img, kp))
            else:
                centers.append(f.pose.center)
        if behind:
            removed += len(pt.track)
            state.remove_point(pid)
            continue
        for img, kp in bad:
            state.remove_observation(pid, img, kp)
            removed += 1
        if pid not in state.points:
            continue
        if len(centers) >= 2:
            best = 0.0
            for a in range(len(centers)):
                for b in range(a + 1, len(centers)):
                    best = max(best, float(triangulation_angle(centers[a], centers[b], pt.position)[0]))
            if best < min_angle and not _has_anchor(state, pid):
                removed += len(state.points[pid].track)
                state.remove_point(pid)
    return removed


def plan_refinement(state, trigger: Optional[str] = None) -> RefinementSchedule:
    """Global when the model grew by growth_ratio since the last global
    refinement (or is no bigger than the window), else a local window of the
    newest image and its most-connected registered neighbours."""
    cfg = state.config
    n_reg, n_pts = len(state.registered), len(state.points)
    last_reg, last_pts = state.last_global
    grew = (last_reg == 0 or n_reg >= cfg.growth_ratio * last_reg
            or (last_pts > 0 and n_pts >= cfg.growth_ratio * last_pts) or last_pts == 0)
    kw = dict(rounds=cfg.alternation_rounds, window=cfg.local_window, growth_ratio=cfg.growth_ratio)
    if n_reg <= cfg.local_window or grew or trigger is None:
        return RefinementSchedule("global", list(state.registered), **kw)
    shared: Dict[str, int] = {}
    f = state.frames[trigger]
    for pid in set(int(p) for p in f.kp_point[f.kp_point >= 0]):
        for img, _ in state.points[pid].track:
            if img != trigger and state.frames[img].registered:
                shared[img] = shared.get(img, 0) + 1
    others = sorted(shared, key=lambda k: (-shared[k], k))[: cfg.local_window - 1]
    return RefinementSchedule("local", [trigger] + others, **kw)
