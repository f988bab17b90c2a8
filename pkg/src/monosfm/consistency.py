"""Dense forward-backward depth consistency between registered views."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .geometry import CameraIntrinsics, PoseSE3

CONSISTENT, INCONSISTENT, OCCLUDED = 0, 1, 2


@dataclass
class DepthBuffer:
    depth: np.ndarray    # (H, W) minimum reprojected depth, NaN where uncovered
    sigma: np.ndarray    # (H, W) standard deviation carried with the winning sample

    @property
    def covered(self) -> np.ndarray:
        return np.isfinite(self.depth)


def reproject_depth(K_src: CameraIntrinsics, P_src: PoseSE3, D_src: np.ndarray, sigma_src: np.ndarray,
                    K_dst: CameraIntrinsics, P_dst: PoseSE3, radius: int = 1) -> DepthBuffer:
    """Lift every valid source pixel, move it into the target camera and splat
    it to the nearest target pixel with a (2r+1)^2 footprint, keeping the
    nearest surface per pixel."""
    H, W = K_dst.height, K_dst.width
    depth = np.full((H, W), np.nan)
    sig = np.full((H, W), np.nan)
    D = np.asarray(D_src, dtype=float)
    valid = np.isfinite(D) & (D > 0)
    if not valid.any():
        return DepthBuffer(depth, sig)
    v, u = np.nonzero(valid)
    d = D[v, u]
    s = np.asarray(sigma_src, dtype=float)[v, u]
    Xc = np.stack([(u - K_src.cx) * d / K_src.fx, (v - K_src.cy) * d / K_src.fy, d], axis=1)
    rel = P_dst.compose(P_src.inverse())
    Y = Xc @ rel.R.T + rel.t
    z = Y[:, 2]
    front = z > 0
    Y, z, s = Y[front], z[front], s[front]
    pu = np.rint(K_dst.fx * Y[:, 0] / z + K_dst.cx).astype(np.int64)
    pv = np.rint(K_dst.fy * Y[:, 1] / z + K_dst.cy).astype(np.int64)
    us, vs, zs, ss = [], [], [], []
    for dv in range(-radius, radius + 1):
        for du in range(-radius, radius + 1):
            uu, vv = pu + du, pv + dv
            ok = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
            us.append(uu[ok]); vs.append(vv[ok]); zs.append(z[ok]); ss.append(s[ok])
    uu, vv, zz, sv = (np.concatenate(a) for a in (us, vs, zs, ss))
    if not len(zz):
        return DepthBuffer(depth, sig)
    pix = vv * W + uu
    order = np.lexsort((zz, pix))
    pix, zz, sv = pix[order], zz[order], sv[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    depth.ravel()[pix[first]] = zz[first]
    sig.ravel()[pix[first]] = sv[first]
    return DepthBuffer(depth, sig)


def violation_mask(D: np.ndarray, sigma: np.ndarray, buf: DepthBuffer, gamma: float) -> np.ndarray:
    """Pixels where the reprojected surface lies in front of the stored one
    by more than gamma combined standard deviations."""
    with np.errstate(invalid="ignore"):
        m = (D - buf.depth) / (sigma + buf.sigma) > gamma
    return m & np.isfinite(D) & buf.covered


def inconsistency_ratio(D_i: np.ndarray, sigma_i: np.ndarray, buf_i: DepthBuffer,
                        D_c: np.ndarray, sigma_c: np.ndarray, buf_c: DepthBuffer, gamma: float = 3.0) -> float:
    """Fraction of free-space violations in i plus the mirrored fraction in c,
    each normalized by the full image area; lies in [0, 2]."""
    a = violation_mask(D_i, sigma_i, buf_i, gamma)
    b = violation_mask(D_c, sigma_c, buf_c, gamma)
    return float(a.sum()) / a.size + float(b.sum()) / b.size


def label_raster(D: np.ndarray, sigma: np.ndarray, buf: DepthBuffer, gamma: float) -> np.ndarray:
    """Per-pixel label: 0 consistent, 1 inconsistent, 2 occluded, NaN uncovered."""
    out = np.full(D.shape, np.nan, dtype=np.float32)
    cov = buf.covered & np.isfinite(D)
    with np.errstate(invalid="ignore"):
        r = (D - buf.depth) / (sigma + buf.sigma)
    out[cov] = CONSISTENT
    out[cov & (r > gamma)] = INCONSISTENT
    out[cov & (r < -gamma)] = OCCLUDED
    return out


@dataclass
class CheckResult:
    accepted: bool
    ratios: Dict[str, float] = field(default_factory=dict)
    conflicts: List[str] = field(default_factory=list)


def pair_ratio(state, i: str, c: str, gamma: float) -> float:
    fi, fc = state.frames[i], state.frames[c]
    r = state.config.splat_radius
    buf_i = reproject_depth(fc.K, fc.pose, fc.depth_refined, fc.depth_sigma, fi.K, fi.pose, r)
    buf_c = reproject_depth(fi.K, fi.pose, fi.depth_refined, fi.depth_sigma, fc.K, fc.pose, r)
    return inconsistency_ratio(fi.depth_refined, fi.depth_sigma, buf_i,
                               fc.depth_refined, fc.depth_sigma, buf_c, gamma)


def overlap_partners(state, c: str) -> List[str]:
    """Registered views sharing at least one scene point with c."""
    f = state.frames[c]
    out = set()
    for pid in set(int(p) for p in f.kp_point[f.kp_point >= 0]):
        for img, _ in state.points[pid].track:
            if img != c and state.frames[img].registered:
                out.add(img)
    return sorted(out)


def check_view(state, c: str, gamma: Optional[float] = None, beta_max: Optional[float] = None) -> CheckResult:
    cfg = state.config
    gamma = cfg.consistency_gamma if gamma is None else gamma
    beta_max = cfg.consistency_beta if beta_max is None else beta_max
    res = CheckResult(True)
    for i in overlap_partners(state, c):
        beta = pair_ratio(state, i, c, gamma)
        res.ratios[i] = beta
        if beta > beta_max:
            res.conflicts.append(i)
    res.accepted = not res.conflicts
    return res
