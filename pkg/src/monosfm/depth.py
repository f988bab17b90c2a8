"""Per-image depth refinement: prior uncertainty calibration, normal
uncertainty propagation and uncertainty-weighted bilateral normal integration
anchored by scene-point depths.

Normal residuals. For pixel p and a one-sided neighbour q, the perspective
tangency constraint n_p . (D_q ray_q - D_p ray_p) = 0 holds exactly on planes.
Scaled by the focal length and divided by the current depth at p it reads

    r = (n~ (D_q - D_p) + n_x D_q) / D_p          (horizontal, forward)

which is n~ d(log D) + n_x to first order, with
n~_{z,x} = n_x (u - cx) + n_y (v - cy) fx / fy + n_z fx.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import uniform_filter
from scipy.sparse.linalg import LinearOperator, cg, splu, spsolve

from .errors import NoValidObservations, ShapeMismatch, SolverFailure
from .geometry import CameraIntrinsics, Raster, bilinear_weights, sample_bilinear
from .losses import Cauchy, TruncatedL2

try:
    import pyamg
except ImportError:  # pragma: no cover - optional preconditioner
    pyamg = None


def _arr(x) -> np.ndarray:
    return x.values.astype(float) if isinstance(x, Raster) else np.asarray(x, dtype=float)


# ---------------------------------------------------------------------------
# prior uncertainty


def calibrate_depth_uncertainty(D, sigma_raw, floor_abs: float = 0.02, c_prop: float = 0.05,
                                c_scale: float = 1.0):
    """sigma = max(max(c_scale * sigma_raw, floor_abs), c_prop * D), per pixel."""
    d, s = _arr(D), _arr(sigma_raw)
    if d.shape != s.shape:
        raise ShapeMismatch(f"depth {d.shape} vs sigma {s.shape}")
    out = np.maximum(np.maximum(c_scale * s, floor_abs), c_prop * d)
    out[~(np.isfinite(d) & np.isfinite(s))] = np.nan
    return Raster(out) if isinstance(D, Raster) else out


def scale_depth(D, uv: np.ndarray, target_depths: np.ndarray) -> float:
    """Median ratio between scene-point depths and the interpolated prior."""
    prior = sample_bilinear(_arr(D), np.asarray(uv, dtype=float).reshape(-1, 2))
    target = np.asarray(target_depths, dtype=float).reshape(-1)
    ok = np.isfinite(prior) & (prior > 0) & np.isfinite(target) & (target > 0)
    if not ok.any():
        raise NoValidObservations("no observation has a valid prior depth")
    return float(np.median(target[ok] / prior[ok]))


# ---------------------------------------------------------------------------
# normal uncertainty


def normal_to_spherical(n: np.ndarray):
    """theta from +z, phi in the x-y plane, for n = (sin t cos p, sin t sin p, cos t)."""
    n = np.asarray(n, dtype=float)
    theta = np.arccos(np.clip(n[..., 2], -1.0, 1.0))
    phi = np.arctan2(n[..., 1], n[..., 0])
    return theta, phi


def spherical_to_normal(theta, phi) -> np.ndarray:
    return np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1)


def spherical_jacobian(theta, phi) -> np.ndarray:
    """d(x, y, z)/d(theta, phi), shape (..., 3, 2)."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    J = np.zeros(theta.shape + (3, 2))
    J[..., 0, 0] = np.cos(theta) * np.cos(phi)
    J[..., 0, 1] = -np.sin(theta) * np.sin(phi)
    J[..., 1, 0] = np.cos(theta) * np.sin(phi)
    J[..., 1, 1] = np.sin(theta) * np.cos(phi)
    J[..., 2, 0] = -np.sin(theta)
    return J


def ntilde(n: np.ndarray, K: CameraIntrinsics, u, v):
    """(n~_{z,x}, n~_{z,y}) at pixel coordinates (u, v)."""
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    du, dv = u - K.cx, v - K.cy
    ntx = nx * du + ny * dv * K.fx / K.fy + nz * K.fx
    nty = nx * du * K.fy / K.fx + ny * dv + nz * K.fy
    return ntx, nty


def central_residual(n: np.ndarray, K: CameraIntrinsics, u, v, du_log, dv_log):
    """Continuous residual pair (n~_x d_u + n_x, n~_y d_v + n_y)."""
    ntx, nty = ntilde(n, K, u, v)
    return ntx * du_log + n[..., 0], nty * dv_log + n[..., 1]


def residual_jacobians(K: CameraIntrinsics, u, v, du_log, dv_log):
    """d r_u / d n and d r_v / d n, shape (..., 3) each."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    du_log = np.broadcast_to(np.asarray(du_log, dtype=float), u.shape)
    dv_log = np.broadcast_to(np.asarray(dv_log, dtype=float), u.shape)
    a, b = u - K.cx, v - K.cy
    Ju = np.stack([a * du_log + 1.0, b * du_log * K.fx / K.fy, du_log * K.fx], axis=-1)
    Jv = np.stack([a * dv_log * K.fy / K.fx, b * dv_log + 1.0, dv_log * K.fy], axis=-1)
    return Ju, Jv


@dataclass
class NormalResidualModel:
    """Per-pixel terms of the normal residuals and their variances."""

    ntx: np.ndarray
    nty: np.ndarray
    nx: np.ndarray
    ny: np.ndarray
    var_u: np.ndarray
    var_v: np.ndarray
    floor: float = 1e-4

    # one-sided variances are approximated by the central ones
    @property
    def var_u_plus(self):
        return self.var_u

    var_u_minus = var_u_plus

    @property
    def var_v_plus(self):
        return self.var_v

    var_v_minus = var_v_plus


def normal_cartesian_covariance(n: np.ndarray, sigma_theta: np.ndarray, sigma_phi: np.ndarray,
                                pole_eps: float = 1e-6) -> np.ndarray:
    theta, phi = normal_to_spherical(n)
    J = spherical_jacobian(theta, phi)
    S = np.zeros(theta.shape + (2, 2))
    S[..., 0, 0] = sigma_theta**2
    S[..., 1, 1] = sigma_phi**2
    cov = J @ S @ np.swapaxes(J, -1, -2)
    pole = np.sin(theta) < pole_eps
    if np.any(pole):
        iso = np.maximum(sigma_theta, sigma_phi)[pole] ** 2
        cov[pole] = iso[:, None, None] * np.eye(3)
    return cov


def propagate_normal_uncertainty(N, sigma_angular, K: CameraIntrinsics, du_log=None, dv_log=None,
                                 floor: float = 1e-4) -> NormalResidualModel:
    """Map angular normal uncertainty into the variance of each normal residual.

    sigma_angular is in radians, either (H, W) isotropic or (H, W, 2) for
    (sigma_theta, sigma_phi). du_log / dv_log are the current log-depth
    derivatives; when omitted they follow from the normals themselves
    (d_u log D = -n_x / n~_{z,x}).
    """
    n = N.values.astype(float) if isinstance(N, Raster) else np.asarray(N, dtype=float)
    s = sigma_angular.data.astype(float) if isinstance(sigma_angular, Raster) else np.asarray(sigma_angular, dtype=float)
    if s.ndim == 2:
        s = s[:, :, None]
    if n.shape[:2] != s.shape[:2]:
        raise ShapeMismatch(f"normals {n.shape} vs sigma {s.shape}")
    st = s[..., 0]
    sph = s[..., 1] if s.shape[2] > 1 else s[..., 0]
    H, W = n.shape[:2]
    u, v = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    ntx, nty = ntilde(n, K, u, v)
    with np.errstate(divide="ignore", invalid="ignore"):
        if du_log is None:
            du_log = -n[..., 0] / ntx
        if dv_log is None:
            dv_log = -n[..., 1] / nty
    if s.shape[2] == 1:
        # isotropic on the sphere; a (theta, phi) parameterization would
        # collapse at the pole where camera-facing normals live
        cov = st[..., None, None] ** 2 * (np.eye(3) - n[..., :, None] * n[..., None, :])
    else:
        cov = normal_cartesian_covariance(n, st, sph)
    Ju, Jv = residual_jacobians(K, u, v, du_log, dv_log)
    var_u = np.einsum("...i,...ij,...j->...", Ju, cov, Ju)
    var_v = np.einsum("...i,...ij,...j->...", Jv, cov, Jv)
    var_u = np.maximum(var_u, floor)
    var_v = np.maximum(var_v, floor)
    return NormalResidualModel(ntx, nty, n[..., 0].copy(), n[..., 1].copy(), var_u, var_v, floor)


def smoothed_log_gradients(N, K: CameraIntrinsics, size: int = 5):
    """Log-depth derivatives implied by a box-averaged normal field.

    Evaluating the residual Jacobian at the raw per-pixel normal makes the
    weights correlate with the normal noise, which tilts the refined depth.
    """
    n = N.values.astype(float) if isinstance(N, Raster) else np.asarray(N, dtype=float)
    ok = np.all(np.isfinite(n), axis=-1)
    w = uniform_filter(ok.astype(float), size, mode="constant")
    m = np.stack([uniform_filter(np.where(ok, n[..., k], 0.0), size, mode="constant") for k in range(3)], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = m / w[..., None]
        m /= np.linalg.norm(m, axis=-1, keepdims=True)
    m[~ok] = np.nan
    H, W = ok.shape
    u, v = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    ntx, nty = ntilde(m, K, u, v)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -m[..., 0] / ntx, -m[..., 1] / nty


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def flip_covariance(N1, N2) -> np.ndarray:
    """Spherical (theta, phi) covariance of two normal estimates around their mean."""
    n1 = N1.values.astype(float) if isinstance(N1, Raster) else np.asarray(N1, dtype=float)
    n2 = N2.values.astype(float) if isinstance(N2, Raster) else np.asarray(N2, dtype=float)
    if n1.shape != n2.shape:
        raise ShapeMismatch(f"{n1.shape} vs {n2.shape}")
    m = n1 + n2
    norm = np.linalg.norm(m, axis=-1, keepdims=True)
    m = np.where(norm > 1e-12, m / np.where(norm > 1e-12, norm, 1.0), n1)
    tb, pb = normal_to_spherical(m)
    devs = []
    for n in (n1, n2):
        t, p = normal_to_spherical(n)
        dt = t - tb
        dp = _wrap(p - pb)
        dp = np.where(np.sin(tb) < 1e-6, 0.0, dp)
        devs.append((dt, dp))
    (a1, b1), (a2, b2) = devs
    cov = np.zeros(n1.shape[:-1] + (2, 2))
    cov[..., 0, 0] = a1**2 + a2**2
    cov[..., 0, 1] = cov[..., 1, 0] = a1 * b1 + a2 * b2
    cov[..., 1, 1] = b1**2 + b2**2
    return cov


def flip_consistency_covariance(N_orig, N_flipped, sigma_model):
    """Per-pixel angular sigma: the larger of the model's and the flip-derived one.

    The flip-derived sigma is the larger tangent-plane standard deviation, so
    azimuth spread is scaled by sin(theta) of the mean normal.
    """
    cov = flip_covariance(N_orig, N_flipped)
    n1 = N_orig.values.astype(float) if isinstance(N_orig, Raster) else np.asarray(N_orig, dtype=float)
    n2 = N_flipped.values.astype(float) if isinstance(N_flipped, Raster) else np.asarray(N_flipped, dtype=float)
    m = n1 + n2
    m /= np.maximum(np.linalg.norm(m, axis=-1, keepdims=True), 1e-12)
    tb, _ = normal_to_spherical(m)
    flip_sigma = np.sqrt(np.maximum(cov[..., 0, 0], np.sin(tb) ** 2 * cov[..., 1, 1]))
    sm = _arr(sigma_model)
    if sm.shape != flip_sigma.shape:
        raise ShapeMismatch(f"sigma {sm.shape} vs normals {flip_sigma.shape}")
    out = np.maximum(sm, flip_sigma)
    return Raster(out) if isinstance(sigma_model, Raster) else out


# ---------------------------------------------------------------------------
# refinement


@dataclass
class DepthAnchors:
    uv: np.ndarray        # (M, 2)
    depth: np.ndarray     # (M,) scene-point depth in this camera
    var: np.ndarray       # (M,)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0))

    def __len__(self):
        return len(self.depth)


@dataclass
class RefineConfig:
    prior_trunc: float = 5.0
    int_trunc: float = 5.0
    reg_scale: float = 0.05
    bilateral_k: float = 2.0
    max_iters: int = 50
    warmup_iters: int = 5
    rel_tol: float = 1e-5
    cg_rtol: float = 1e-8
    cg_max_iters: int = 300
    direct_precond_max: int = 250_000  # unknowns up to which the preconditioner is a sparse factorization


@dataclass
class RefineResult:
    depth: np.ndarray
    cost: float
    iterations: int
    costs: list = field(default_factory=list)
    variance: Optional[np.ndarray] = None   # inverse diagonal of the final normal matrix


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class _Problem:
    """Sparse residual structure for one image, built once per call."""

    def __init__(self, prior, sigma, model: NormalResidualModel, anchors: DepthAnchors, cfg: RefineConfig):
        H, W = prior.shape
        self.shape = (H, W)
        valid = (np.isfinite(prior) & (prior > 0) & np.isfinite(sigma) & (sigma > 0)
                 & np.isfinite(model.ntx) & np.isfinite(model.nty)
                 & np.isfinite(model.var_u) & np.isfinite(model.var_v))
        self.valid = valid
        idx = -np.ones(H * W, dtype=int)
        flat_valid = valid.ravel()
        idx[flat_valid] = np.arange(flat_valid.sum())
        self.idx = idx
        self.n = int(flat_valid.sum())
        self.cfg = cfg
        self.prior = prior.ravel()[flat_valid]
        self.sigma = sigma.ravel()[flat_valid]

        # one-sided edges: (pixel p, neighbour q, c_p, c_q, variance)
        P, Q, CP, CQ, V, SIDE = [], [], [], [], [], []
        pix = np.arange(H * W).reshape(H, W)
        ntx, nty = model.ntx.ravel(), model.nty.ravel()
        nx, ny = model.nx.ravel(), model.ny.ravel()
        vu, vv = model.var_u.ravel(), model.var_v.ravel()

        def add(p, q, cp, cq, var, side):
            ok = flat_valid[p] & flat_valid[q]
            P.append(idx[p[ok]]); Q.append(idx[q[ok]])
            CP.append(cp[ok]); CQ.append(cq[ok]); V.append(var[ok])
            SIDE.append(np.full(ok.sum(), side)); self._owner.append(idx[p[ok]])

        self._owner = []
        p = pix[:, :-1].ravel(); q = pix[:, 1:].ravel()
        add(p, q, -ntx[p], ntx[p] + nx[p], vu[p], 0)          # u+
        p = pix[:, 1:].ravel(); q = pix[:, :-1].ravel()
        add(p, q, ntx[p], -ntx[p] + nx[p], vu[p], 1)          # u-
        p = pix[:-1, :].ravel(); q = pix[1:, :].ravel()
        add(p, q, -nty[p], nty[p] + ny[p], vv[p], 2)          # v+
        p = pix[1:, :].ravel(); q = pix[:-1, :].ravel()
        add(p, q, nty[p], -nty[p] + ny[p], vv[p], 3)          # v-
        self.ep = np.concatenate(P); self.eq = np.concatenate(Q)
        self.cp = np.concatenate(CP); self.cq = np.concatenate(CQ)
        self.evar = np.concatenate(V); self.side = np.concatenate(SIDE)

        # the partner edge on the opposite side of the same pixel, for bilateral weights
        tab = -np.ones((self.n, 4), dtype=int)
        tab[self.ep, self.side] = np.arange(len(self.ep))
        self.partner = tab[self.ep, self.side ^ 1]

        # anchors
        self.anchor_idx = np.zeros((0, 4), dtype=int)
        self.anchor_w = np.zeros((0, 4))
        self.anchor_t = np.zeros(0)
        self.anchor_var = np.zeros(0)
        if len(anchors):
            aidx, aw = bilinear_weights(W, H, anchors.uv)
            inside = (anchors.uv[:, 0] >= 0) & (anchors.uv[:, 0] <= W - 1) & \
                     (anchors.uv[:, 1] >= 0) & (anchors.uv[:, 1] <= H - 1)
            ok = inside & np.all(flat_valid[aidx], axis=1) & (anchors.depth > 0) & (anchors.var > 0)
            self.anchor_idx = idx[aidx[ok]]
            self.anchor_w = aw[ok]
            self.anchor_t = anchors.depth[ok]
            self.anchor_var = anchors.var[ok]
        self.prior_loss = TruncatedL2(cfg.prior_trunc)
        self.int_loss = TruncatedL2(cfg.int_trunc)
        self.reg_loss = Cauchy(cfg.reg_scale)

        # static sparse operators
        me = len(self.ep)
        rows = np.concatenate([np.arange(me), np.arange(me)])
        self.E_pattern = (rows, np.concatenate([self.ep, self.eq]))
        ma = len(self.anchor_t)
        self.A_anchor = sp.csr_matrix(
            (self.anchor_w.ravel(), (np.repeat(np.arange(ma), 4), self.anchor_idx.ravel())), shape=(ma, self.n))

    def edge_residuals(self, d):
        dbar = np.maximum(d[self.ep], 1e-9)
        return (self.cp * d[self.ep] + self.cq * d[self.eq]) / dbar

    def bilateral(self, r):
        # stiffness relative to the typical squared residual, so noise-level
        # differences give soft weights and discontinuities give hard ones
        w = np.ones_like(r)
        has = self.partner >= 0
        r2 = r**2
        if not len(r2):
            return w
        scale = max(float(np.median(r2)), self.cfg.int_trunc**2 * float(np.median(self.evar)))
        w[has] = _sigmoid(self.cfg.bilateral_k * (r2[self.partner[has]] - r2[has]) / scale)
        return w

    def terms(self, d):
        """(prior cost, integration cost, anchor cost) at depth vector d."""
        sp_ = ((d - self.prior) / self.sigma) ** 2
        r = self.edge_residuals(d)
        si = r**2 / self.evar
        wb = self.bilateral(r)
        ra = self.A_anchor @ d - self.anchor_t
        c_prior = float(self.prior_loss.rho(sp_).sum())
        c_int = float((wb * self.int_loss.rho(si)).sum())
        c_reg = float((self.reg_loss.rho(ra**2) / self.anchor_var).sum())
        return c_prior, c_int, c_reg

    def cost(self, d):
        return sum(self.terms(d))

    def normal_system(self, d, truncate=True, bilateral=True):
        n = self.n
        sp_ = ((d - self.prior) / self.sigma) ** 2
        w_prior = (self.prior_loss.weight(sp_) if truncate else 1.0) / self.sigma**2
        dbar = np.maximum(d[self.ep], 1e-9)
        r = self.edge_residuals(d)
        w_int = self.int_loss.weight(r**2 / self.evar) if truncate else 1.0
        wb = self.bilateral(r) if bilateral else 0.5
        w_edge = wb * w_int / self.evar
        ra = self.A_anchor @ d - self.anchor_t
        w_anchor = self.reg_loss.weight(ra**2) / self.anchor_var

        vals = np.concatenate([self.cp / dbar, self.cq / dbar])
        E = sp.csr_matrix((vals, self.E_pattern), shape=(len(self.ep), n))
        M = (E.T @ sp.diags(w_edge) @ E + self.A_anchor.T @ sp.diags(w_anchor) @ self.A_anchor
             + sp.diags(w_prior)).tocsr()
        b = w_prior * self.prior + self.A_anchor.T @ (w_anchor * self.anchor_t)
        return M, b

    def solve_step(self, d, truncate=True, bilateral=True):
        cfg = self.cfg
        n = self.n
        M, b = self.normal_system(d, truncate, bilateral)
        # pixels cut off from every term keep their value
        diag = np.asarray(M.diagonal())
        free = diag > 0
        if not free.all():
            M = M + sp.diags((~free).astype(float))
            b = np.where(free, b, d)
        # a region whose prior terms are all truncated has a free scale; a
        # tiny ridge towards the current iterate removes it without moving
        # the fixed point
        ridge = 1e-9 * float(diag[free].mean()) if free.any() else 0.0
        M = M + sp.diags(np.full(n, ridge))
        b = b + ridge * d
        precond = _preconditioner(M, cfg.direct_precond_max)
        x, info = cg(M, b, x0=d.copy(), rtol=cfg.cg_rtol, atol=0.0, maxiter=cfg.cg_max_iters, M=precond)
        if info != 0:
            # badly conditioned (very confident anchors); a direct solve is cheap at these sizes
            xd = spsolve(M.tocsc(), b)
            if np.all(np.isfinite(xd)):
                x = xd
        return x


def _preconditioner(M, direct_max: int):
    """Sparse factorization up to `direct_max` unknowns, where it is the
    cheapest way to reach the tolerance, smoothed-aggregation AMG above it."""
    n = M.shape[0]
    if n <= direct_max:
        try:
            lu = splu(M.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                      options=dict(SymmetricMode=True))
            return LinearOperator(M.shape, matvec=lu.solve, dtype=float)
        except RuntimeError:
            pass
    if pyamg is not None and n > 400:
        try:
            return pyamg.smoothed_aggregation_solver(M, symmetry="symmetric").aspreconditioner()
        except Exception:  # pragma: no cover - fall back to Jacobi
            pass
    return sp.diags(1.0 / M.diagonal())


def refine_depth(D_prior, sigma_D, model: NormalResidualModel, anchors: Optional[DepthAnchors] = None,
                 D_init=None, config: Optional[RefineConfig] = None) -> RefineResult:
    """Minimize the prior, normal-integration and anchor terms over the depth map.

    Iteratively reweighted sparse least squares; an iterate is accepted only
    if it lowers the cost, otherwise the best iterate so far is returned.
    """
    cfg = config or RefineConfig()
    prior = _arr(D_prior)
    sigma = _arr(sigma_D)
    if prior.shape != sigma.shape or prior.shape != model.ntx.shape:
        raise ShapeMismatch(f"prior {prior.shape}, sigma {sigma.shape}, normals {model.ntx.shape}")
    anchors = anchors if anchors is not None else DepthAnchors.empty()
    prob = _Problem(prior, sigma, model, anchors, cfg)
    init = prior if D_init is None else _arr(D_init)
    d = init.ravel()[prob.valid.ravel()].copy()
    bad = ~(np.isfinite(d) & (d > 0))
    d[bad] = prob.prior[bad]

    cost = prob.cost(d)
    if not np.isfinite(cost):
        raise SolverFailure("non-finite refinement cost at the initial depth")
    costs = [cost]
    it = 0
    # Warm-up passes ignore truncation: from a noisy start every residual sits
    # beyond the cutoff, and the bilateral weights need a few smooth iterates
    # to settle on the correct side of each discontinuity. Warm-up iterates
    # only replace the returned solution when they lower the true cost.
    best_d, best_cost = d, cost
    it = 0
    x = d
    for _ in range(cfg.warmup_iters):
        it += 1
        x_new = prob.solve_step(x, truncate=False)
        if not np.all(np.isfinite(x_new)):
            break
        step = np.max(np.abs(x_new - x) / np.maximum(np.abs(x), 1e-12))
        x = x_new
        c = prob.cost(x)
        if np.isfinite(c) and c < best_cost:
            best_d, best_cost = x, c
            costs.append(c)
        if step < 1e-4:
            break
    d, cost = best_d, best_cost
    for _ in range(cfg.max_iters):
        it += 1
        x = prob.solve_step(d, truncate=True)
        if not np.all(np.isfinite(x)):
            raise SolverFailure("non-finite depth after linear solve")
        new_cost = prob.cost(x)
        if not np.isfinite(new_cost):
            raise SolverFailure("non-finite refinement cost")
        if new_cost > cost:
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        d, cost = x, new_cost
        costs.append(cost)
        if rel < cfg.rel_tol:
            break
    out = np.full(prob.shape[0] * prob.shape[1], np.nan)
    out[prob.valid.ravel()] = d
    var = np.full_like(out, np.nan)
    if prob.n:
        diag = np.asarray(prob.normal_system(d)[0].diagonal())
        with np.errstate(divide="ignore"):
            var[prob.valid.ravel()] = np.where(diag > 0, 1.0 / diag, np.inf)
    return RefineResult(out.reshape(prob.shape), cost, it, costs, var.reshape(prob.shape))


def refinement_cost(D, D_prior, sigma_D, model: NormalResidualModel, anchors: Optional[DepthAnchors] = None,
                    config: Optional[RefineConfig] = None) -> float:
    cfg = config or RefineConfig()
    anchors = anchors if anchors is not None else DepthAnchors.empty()
    prob = _Problem(_arr(D_prior), _arr(sigma_D), model, anchors, cfg)
    d = _arr(D).ravel()[prob.valid.ravel()]
    return prob.cost(d)


def refinement_terms(D, D_prior, sigma_D, model: NormalResidualModel, anchors: Optional[DepthAnchors] = None,
                     config: Optional[RefineConfig] = None):
    cfg = config or RefineConfig()
    anchors = anchors if anchors is not None else DepthAnchors.empty()
    prob = _Problem(_arr(D_prior), _arr(sigma_D), model, anchors, cfg)
    d = _arr(D).ravel()[prob.valid.ravel()]
    return prob.terms(d)


def normal_residuals(D, model: NormalResidualModel):
    """The four one-sided residual rasters (u+, u-, v+, v-); NaN where a side is missing."""
    d = _arr(D)
    H, W = d.shape
    out = np.full((4, H, W), np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        out[0, :, :-1] = (-model.ntx[:, :-1] * d[:, :-1] + (model.ntx[:, :-1] + model.nx[:, :-1]) * d[:, 1:]) / d[:, :-1]
        out[1, :, 1:] = (model.ntx[:, 1:] * d[:, 1:] + (-model.ntx[:, 1:] + model.nx[:, 1:]) * d[:, :-1]) / d[:, 1:]
        out[2, :-1, :] = (-model.nty[:-1] * d[:-1] + (model.nty[:-1] + model.ny[:-1]) * d[1:]) / d[:-1]
        out[3, 1:, :] = (model.nty[1:] * d[1:] + (-model.nty[1:] + model.ny[1:]) * d[:-1]) / d[1:]
    return out


def should_skip_refinement(prev_cost: float, cur_cost: float, threshold: float = 1e-3) -> bool:
    if prev_cost == 0:
        return cur_cost == 0
    return abs(cur_cost - prev_cost) / abs(prev_cost) < threshold
