"""RANSAC-wrapped minimal solvers: relative pose (8-point), absolute pose (P3P)
and multi-view triangulation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from .errors import BehindCamera, DegenerateConfiguration, InsufficientMatches, NoConsensus
from .geometry import CameraIntrinsics, PoseSE3, so3_exp, triangulation_angle


@dataclass
class RansacResult:
    model: Optional[PoseSE3]
    inlier_mask: np.ndarray
    iterations: int
    success: bool
    parallax_deg: float = float("nan")
    stable: bool = False

    @property
    def inlier_count(self) -> int:
        return int(np.count_nonzero(self.inlier_mask))


_MIN_RANSAC_ITERS = 100
_N_STARTS = 8
_RIVAL_RATIO = 1.25


def ransac_iterations(inlier_ratio: float, sample_size: int, confidence: float, cap: int) -> int:
    if inlier_ratio >= 1.0:
        return 1
    if inlier_ratio <= 0.0:
        return cap
    denom = math.log(max(1e-300, 1.0 - inlier_ratio**sample_size))
    if denom == 0.0:
        return cap
    return int(min(cap, max(1, math.ceil(math.log(1.0 - confidence) / denom))))


def normalized_coords(K: CameraIntrinsics, uv: np.ndarray) -> np.ndarray:
    uv = np.atleast_2d(uv)
    return np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy], axis=1)


# ---------------------------------------------------------------------------
# relative pose


def _hartley(x: np.ndarray):
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    xh = np.hstack([x, np.ones((len(x), 1))]) @ T.T
    return xh, T


def essential_8point(xa: np.ndarray, xb: np.ndarray) -> Optional[np.ndarray]:
    """Essential matrix E with xb^T E xa = 0 from >= 8 normalized correspondences."""
    ha, Ta = _hartley(xa)
    hb, Tb = _hartley(xb)
    A = np.einsum("ni,nj->nij", hb, ha).reshape(len(xa), 9)
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    E = Tb.T @ E @ Ta
    U, S, Vt = np.linalg.svd(E)
    if S[0] <= 0:
        return None
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    return E / np.linalg.norm(E)


def sampson_px(E: np.ndarray, Ka: CameraIntrinsics, Kb: CameraIntrinsics, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Sampson distance in pixels of pixel correspondences under E."""
    F = np.linalg.inv(Kb.K).T @ E @ np.linalg.inv(Ka.K)
    ha = np.hstack([pa, np.ones((len(pa), 1))])
    hb = np.hstack([pb, np.ones((len(pb), 1))])
    Fa = ha @ F.T
    Ftb = hb @ F
    num = np.einsum("ni,ni->n", hb, Fa) ** 2
    den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(np.where(den > 0, num / den, np.inf))


def decompose_essential(E: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    out = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        out.append((R, t.copy()))
        out.append((R, -t))
    return out


def triangulate_normalized(poses: Sequence[PoseSE3], xs: Sequence[np.ndarray]) -> np.ndarray:
    """Batch two-or-more view DLT on normalized coordinates.

    xs[i] is (N, 2); returns (N, 3) homogeneous-dehomogenized points (NaN at infinity)."""
    N = len(xs[0])
    A = np.zeros((N, 2 * len(poses), 4))
    for i, (P, x) in enumerate(zip(poses, xs)):
        M = P.matrix
        A[:, 2 * i] = x[:, 0:1] * M[2] - M[0]
        A[:, 2 * i + 1] = x[:, 1:2] * M[2] - M[1]
    A /= np.linalg.norm(A, axis=2, keepdims=True) + 1e-300
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        X = Xh[:, :3] / Xh[:, 3:4]
    X[np.abs(Xh[:, 3]) < 1e-12] = np.nan
    return X


def _angle_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.einsum("ij,ij->i", a, b))


def _skew3(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _bearings(x: np.ndarray) -> np.ndarray:
    h = np.column_stack([x, np.ones(len(x))])
    return h / np.linalg.norm(h, axis=1, keepdims=True)


def _best_rotation(xa: np.ndarray, xb: np.ndarray, rounds: int = 5) -> np.ndarray:
    """Pure rotation best aligning the bearings, refit on the best 80%."""
    ba, bb = _bearings(xa), _bearings(xb)
    keep = np.ones(len(ba), dtype=bool)
    R = np.eye(3)
    for _ in range(rounds):
        U, _, Vt = np.linalg.svd(ba[keep].T @ bb[keep])
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
        R = Vt.T @ D @ U.T
        ang = _angle_rows(ba @ R.T, bb)
        keep = ang <= np.quantile(ang, 0.8)
    return R


def _translation_given_rotation(R: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    # x_b^T [t]x R x_a = 0 is linear in t: t . (R x_a x x_b) = 0
    A = np.cross(_bearings(xa) @ R.T, _bearings(xb))
    return np.linalg.svd(A)[2][-1]


def _sampson_normalized(R, t, xa, xb):
    E = _skew3(t) @ R
    ha = np.column_stack([xa, np.ones(len(xa))])
    hb = np.column_stack([xb, np.ones(len(xb))])
    Ea = ha @ E.T
    Etb = hb @ E
    num = np.einsum("ni,ni->n", hb, Ea)
    den = np.sqrt(Ea[:, 0] ** 2 + Ea[:, 1] ** 2 + Etb[:, 0] ** 2 + Etb[:, 1] ** 2)
    return num / np.maximum(den, 1e-300)


def _twist(t: np.ndarray) -> np.ndarray:
    u = t / np.linalg.norm(t)
    return 2.0 * np.outer(u, u) - np.eye(3)


def _median_parallax(ha: np.ndarray, hb: np.ndarray, R: np.ndarray) -> float:
    if not len(ha):
        return 0.0
    return float(np.degrees(np.median(_angle_rows(ha @ R.T, hb))))


def _refine_relative(R0, t0, xa, xb, f_scale):
    """Robust Sampson-error minimization over (R, unit t)."""
    t0 = t0 / np.linalg.norm(t0)
    B = np.linalg.svd(t0[None, :])[2][1:].T          # tangent basis of the sphere at t0

    def unpack(p):
        t = t0 + B @ p[3:]
        return so3_exp(p[:3]) @ R0, t / np.linalg.norm(t)

    sol = least_squares(lambda p: _sampson_normalized(*unpack(p), xa, xb), np.zeros(5),
                        loss="soft_l1", f_scale=f_scale, max_nfev=200)
    # soft_l1 still lets gross outliers pull, and with many of them it can
    # leave a good start; finish with plain least squares on the inliers,
    # from both the start and the robust solution
    best = None
    for p in (np.zeros(5), sol.x):
        for _ in range(3):
            inl = np.abs(_sampson_normalized(*unpack(p), xa, xb)) < f_scale
            if inl.sum() < 8:
                break
            p = least_squares(lambda q: _sampson_normalized(*unpack(q), xa[inl], xb[inl]), p, max_nfev=100).x
        R, t = unpack(p)
        cost = float(np.minimum(_sampson_normalized(R, t, xa, xb) ** 2, f_scale**2).sum())
        if best is None or cost < best[2]:
            best = (R, t, cost)
    return best


def estimate_relative_pose(
    Ka: CameraIntrinsics,
    Kb: CameraIntrinsics,
    pa: np.ndarray,
    pb: np.ndarray,
    threshold_px: float = 4.0,
    min_inliers: int = 15,
    min_parallax_deg: float = 1.5,
    confidence: float = 0.9999,
    max_iterations: int = 10000,
    seed: int = 0,
) -> RansacResult:
    """Pose T_ba (a-frame to b-frame) with unit translation, plus a parallax report."""
    pa = np.asarray(pa, dtype=float)
    pb = np.asarray(pb, dtype=float)
    n = len(pa)
    if n < 8:
        raise InsufficientMatches(f"relative pose needs >= 8 correspondences, got {n}")
    xa = normalized_coords(Ka, pa)
    xb = normalized_coords(Kb, pb)
    rng = np.random.default_rng(seed)

    best_key, best_mask = None, None
    top = []  # a few best hypotheses, refined below as extra starts
    needed, it = max_iterations, 0
    while it < needed:
        it += 1
        sample = rng.choice(n, 8, replace=False)
        E = essential_8point(xa[sample], xb[sample])
        if E is None:
            continue
        err = sampson_px(E, Ka, Kb, pa, pb)
        mask = err < threshold_px
        # MSAC score: with a lenient threshold many poor models reach similar
        # inlier counts, the truncated error separates them
        key = -float((np.minimum(err, threshold_px) ** 2).sum())
        # keep hypotheses with distinct consensus sets: in near-planar scenes
        # the best few are often copies of one wrong model
        same = [i for i, c in enumerate(top) if (c[2] & mask).sum() > 0.7 * (c[2] | mask).sum()]
        if same:
            if key > top[same[0]][0]:
                top[same[0]] = (key, E, mask)
        else:
            top.append((key, E, mask))
        top.sort(key=lambda c: -c[0])
        del top[_N_STARTS:]
        if best_key is None or key > best_key:
            best_key, best_mask = key, mask
            needed = min(needed, max(_MIN_RANSAC_ITERS, ransac_iterations(mask.mean(), 8, confidence, max_iterations)))
    if best_mask is None or best_mask.sum() < 8:
        return RansacResult(None, np.zeros(n, dtype=bool), it, False)

    # least-squares polish on the consensus set
    mask = best_mask
    for _ in range(3):
        E = essential_8point(xa[mask], xb[mask])
        if E is None:
            break
        new_mask = sampson_px(E, Ka, Kb, pa, pb) < threshold_px
        if new_mask.sum() < 8 or np.array_equal(new_mask, mask):
            mask = new_mask if new_mask.sum() >= 8 else mask
            break
        mask = new_mask
    E = essential_8point(xa[mask], xb[mask])
    if E is None:
        raise DegenerateConfiguration("essential matrix collapsed on the inlier set")

    # nonlinear polish of (R, t) on the consensus set, started from the
    # linear estimate and from the best pure rotation; at small baselines the
    # linear estimate can carry a grossly wrong rotation
    # near-planar scenes make single 8-point models unreliable, so the best
    # few sampled hypotheses are refined as well
    Pa = PoseSE3.identity()
    starts = []
    for R, t in decompose_essential(E):
        X = triangulate_normalized([Pa, PoseSE3.from_Rt(R, t)], [xa[mask], xb[mask]])
        front = np.isfinite(X[:, 2]) & (X[:, 2] > 0) & (X @ R[2] + t[2] > 0)
        starts.append((int(front.sum()), R, t))
    starts = [max(starts, key=lambda c: c[0])[1:]]
    # a poor model's cheirality vote is unreliable, so both rotations of
    # every kept hypothesis are tried
    # the Sampson cost ignores the sign of t, so two rotations per model
    for c in top:
        starts.extend(decompose_essential(c[1])[::2])
    R0 = _best_rotation(xa, xb)
    starts.append((R0, _translation_given_rotation(R0, xa, xb)))
    scale = 0.5 * (Ka.fx + Ka.fy + Kb.fx + Kb.fy) / 2.0
    # all correspondences, so candidates are compared on the same data; the
    # robust loss keeps outliers in check
    fits = [_refine_relative(R, t, xa, xb, threshold_px / scale) for R, t in starts]
    best_fit = min(fits, key=lambda f: f[2])
    R, t, _ = best_fit
    # motions explaining the data nearly as well; at low parallax these can
    # differ a lot, and the stability test takes the least favourable one
    rivals = [f[:2] for f in fits if f[2] < _RIVAL_RATIO * best_fit[2]]
    E = _skew3(t) @ R
    mask = sampson_px(E, Ka, Kb, pa, pb) < threshold_px
    if mask.sum() < 8:
        raise DegenerateConfiguration("refined essential matrix lost its consensus")

    # the refined E fixes the pose up to the twisted pair and the sign of t,
    # cheirality picks among the four
    best = None
    for Rc, tc in decompose_essential(E):
        Pb = PoseSE3.from_Rt(Rc, tc)
        X = triangulate_normalized([Pa, Pb], [xa[mask], xb[mask]])
        front = np.isfinite(X[:, 2]) & (X[:, 2] > 0) & (X @ Rc[2] + tc[2] > 0)
        if best is None or front.sum() > best[0]:
            best = (int(front.sum()), Pb, front)
    cnt, Pb, front = best
    if cnt == 0:
        raise DegenerateConfiguration("no decomposition places points in front of both cameras")
    inliers = np.zeros(n, dtype=bool)
    idx = np.flatnonzero(mask)
    inliers[idx[front]] = True
    # triangulation angle through the bearings, which needs only the rotation
    ha = np.column_stack([xa[inliers], np.ones(int(inliers.sum()))])
    hb = np.column_stack([xb[inliers], np.ones(int(inliers.sum()))])
    ha /= np.linalg.norm(ha, axis=1, keepdims=True)
    hb /= np.linalg.norm(hb, axis=1, keepdims=True)
    parallax = _median_parallax(ha, hb, Pb.R)
    # rivals are compared modulo the twisted pair
    worst = min([parallax] + [min(_median_parallax(ha, hb, Rr), _median_parallax(ha, hb, _twist(tr) @ Rr))
                              for Rr, tr in rivals])
    stable = inliers.sum() >= min_inliers and worst >= min_parallax_deg
    return RansacResult(Pb, inliers, it, bool(inliers.sum() >= min_inliers), parallax, bool(stable))


# ---------------------------------------------------------------------------
# absolute pose


def kabsch(X: np.ndarray, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Rigid (R, t) minimizing sum |R X + t - Y|^2."""
    cx, cy = X.mean(axis=0), Y.mean(axis=0)
    H = (X - cx).T @ (Y - cy)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, cy - R @ cx


def p3p(bearings: np.ndarray, X: np.ndarray) -> List[PoseSE3]:
    """All poses consistent with three unit bearings and their world points.

    The ratios u = s1/s0, v = s2/s0 of the unknown ray lengths satisfy two
    conics obtained from the law of cosines; eliminating v with the Bezout
    resultant gives a quartic in u.
    """
    f = bearings / np.linalg.norm(bearings, axis=1, keepdims=True)
    c01, c02, c12 = f[0] @ f[1], f[0] @ f[2], f[1] @ f[2]
    d01 = np.sum((X[0] - X[1]) ** 2)
    d02 = np.sum((X[0] - X[2]) ** 2)
    d12 = np.sum((X[1] - X[2]) ** 2)
    if min(d01, d02, d12) < 1e-18:
        return []
    P = np.polynomial.Polynomial
    p2 = P([-d01])
    p1 = P([2 * d01 * c02])
    p0 = P([d02 - d01, -2 * d02 * c01, d02])
    q2 = P([d02 - d12])
    q1 = P([2 * d12 * c02, -2 * d02 * c12])
    q0 = P([-d12, 0.0, d02])
    a = p2 * q0 - p0 * q2
    b = p2 * q1 - p1 * q2
    c = p1 * q0 - p0 * q1
    res = a * a - b * c
    coef = res.coef
    scale = np.max(np.abs(coef))
    if scale == 0:
        return []
    roots = P(coef / scale).roots()
    poses = []
    for r in roots:
        if abs(r.imag) > 1e-8 * max(1.0, abs(r.real)):
            continue
        u = r.real
        if u <= 0:
            continue
        bu = b(u)
        vs = []
        if abs(bu) > 1e-12 * max(1.0, abs(a(u))):
            vs = [-a(u) / bu]
        else:
            vs = [v.real for v in P([p0(u), p1(u), p2(u)]).roots() if abs(v.imag) < 1e-8]
        for v in vs:
            if v <= 0:
                continue
            g = 1 + u * u - 2 * u * c01
            if g <= 0:
                continue
            s0 = math.sqrt(d01 / g)
            s = np.array([s0, u * s0, v * s0])
            Pc = f * s[:, None]
            R, t = kabsch(X, Pc)
            poses.append(PoseSE3.from_Rt(R, t))
    return poses


def reprojection_errors(K: CameraIntrinsics, P: PoseSE3, uv: np.ndarray, X: np.ndarray) -> np.ndarray:
    Xc = P.apply(X)
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pu = K.fx * Xc[:, 0] / z + K.cx
        pv = K.fy * Xc[:, 1] / z + K.cy
        err = np.hypot(pu - uv[:, 0], pv - uv[:, 1])
    err[~(z > 0)] = np.inf
    return err


def refine_pose(K: CameraIntrinsics, P: PoseSE3, uv: np.ndarray, X: np.ndarray,
                weights: Optional[np.ndarray] = None) -> PoseSE3:
    """Reprojection-error polish of a pose on fixed points."""
    sw = np.ones(len(uv)) if weights is None else np.sqrt(weights)

    def fun(p):
        Q = P.perturbed(p[:3], p[3:])
        Xc = Q.apply(X)
        z = np.maximum(Xc[:, 2], 1e-9)
        r = np.stack([K.fx * Xc[:, 0] / z + K.cx - uv[:, 0], K.fy * Xc[:, 1] / z + K.cy - uv[:, 1]], axis=1)
        return (r * sw[:, None]).ravel()

    sol = least_squares(fun, np.zeros(6), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200)
    return P.perturbed(sol.x[:3], sol.x[3:])


def estimate_absolute_pose(
    K: CameraIntrinsics,
    uv: np.ndarray,
    X: np.ndarray,
    depth_var: Optional[np.ndarray] = None,
    threshold_px: float = 8.0,
    min_inliers: int = 12,
    confidence: float = 0.9999,
    max_iterations: int = 10000,
    seed: int = 0,
) -> RansacResult:
    uv = np.asarray(uv, dtype=float)
    X = np.asarray(X, dtype=float)
    n = len(uv)
    if n < 4:
        raise InsufficientMatches(f"absolute pose needs >= 4 correspondences, got {n}")
    xn = normalized_coords(K, uv)
    bearings = np.hstack([xn, np.ones((n, 1))])
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)
    rng = np.random.default_rng(seed)

    best_key, best_pose, best_mask = None, None, None
    needed, it = max_iterations, 0
    while it < needed:
        it += 1
        sample = rng.choice(n, 3, replace=False)
        for P in p3p(bearings[sample], X[sample]):
            err = reprojection_errors(K, P, uv, X)
            mask = err < threshold_px
            key = (int(mask.sum()), -float(np.minimum(err, threshold_px).sum()))
            if best_key is None or key > best_key:
                best_key, best_pose, best_mask = key, P, mask
                needed = min(needed, ransac_iterations(mask.mean(), 3, confidence, max_iterations))
    if best_pose is None or best_mask.sum() < 4:
        raise NoConsensus("no P3P hypothesis found a consensus set")

    weights = None
    if depth_var is not None:
        z = np.maximum(best_pose.apply(X)[:, 2], 1e-9)
        # lateral spread of an uncertain point as seen from this view, in pixels^2
        weights = 1.0 / (1.0 + np.asarray(depth_var, dtype=float) * (K.fx / z) ** 2)

    P, mask = best_pose, best_mask
    for _ in range(4):
        P = refine_pose(K, P, uv[mask], X[mask], None if weights is None else weights[mask])
        new_mask = reprojection_errors(K, P, uv, X) < threshold_px
        if np.array_equal(new_mask, mask) or new_mask.sum() < 4:
            break
        mask = new_mask
    success = bool(mask.sum() >= min_inliers)
    return RansacResult(P, mask, it, success)


# ---------------------------------------------------------------------------
# triangulation


@dataclass
class Triangulation:
    point: np.ndarray
    angle_rad: float
    low_parallax: bool


def triangulate(
    Ks: Sequence[CameraIntrinsics],
    poses: Sequence[PoseSE3],
    pixels: Sequence[np.ndarray],
    min_angle_deg: float = 1.5,
) -> Triangulation:
    if len(poses) < 2:
        raise InsufficientMatches("triangulation needs >= 2 views")
    centers = [P.center for P in poses]
    xs = [normalized_coords(K, np.asarray(p, dtype=float))[0:1] for K, p in zip(Ks, pixels)]
    X = triangulate_normalized(poses, xs)[0]
    baseline = max(np.linalg.norm(c - centers[0]) for c in centers)
    if baseline < 1e-12 or not np.all(np.isfinite(X)):
        return Triangulation(X, 0.0, True)

    def fun(x):
        r = []
        for K, P, p in zip(Ks, poses, pixels):
            xc = P.R @ x + P.t
            r += [K.fx * xc[0] / xc[2] + K.cx - p[0], K.fy * xc[1] / xc[2] + K.cy - p[1]]
        return np.array(r)

    depths = [P.R[2] @ X + P.t[2] for P in poses]
    if min(depths) > 0:
        sol = least_squares(fun, X, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=100)
        X = sol.x
    for P in poses:
        if not P.R[2] @ X + P.t[2] > 0:
            raise BehindCamera("triangulated point lies behind a camera")
    angle = 0.0
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            if np.linalg.norm(centers[i] - centers[j]) < 1e-12:
                continue
            angle = max(angle, float(triangulation_angle(centers[i], centers[j], X)[0]))
    return Triangulation(X, angle, angle < math.radians(min_angle_deg))
