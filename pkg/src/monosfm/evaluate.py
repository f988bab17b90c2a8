"""Pairwise relative-pose accuracy and its area under the recall curve."""
from __future__ import annotations

from itertools import combinations
from typing import Dict, Mapping, Sequence

import numpy as np

from .errors import NoCommonImages
from .geometry import PoseSE3, rotation_angle


def _angle_between(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 180.0
    c = np.clip(a @ b / (na * nb), -1.0, 1.0)
    # atan2 form stays accurate for nearly parallel vectors
    s = np.linalg.norm(np.cross(a / na, b / nb))
    return float(np.degrees(np.arctan2(s, c)))


def _scene_scale(poses: Mapping[str, PoseSE3]) -> float:
    C = np.array([p.center for p in poses.values()])
    if len(C) < 2:
        return 1.0
    d = np.linalg.norm(C[:, None] - C[None], axis=-1)
    return float(d.max()) or 1.0


def pairwise_errors(gt: Mapping[str, PoseSE3], est: Mapping[str, PoseSE3]) -> Dict[tuple, float]:
    """max(rotation error, translation-direction error) in degrees for every
    ground-truth pair; pairs with an unregistered image get inf."""
    common = [k for k in gt if k in est]
    if len(common) < 2:
        raise NoCommonImages(f"need >= 2 images registered in both sets, got {len(common)}")
    tiny_gt = 1e-6 * _scene_scale(gt)
    tiny_est = 1e-6 * _scene_scale({k: est[k] for k in common})
    out = {}
    for i, j in combinations(sorted(gt), 2):
        if i not in est or j not in est:
            out[(i, j)] = np.inf
            continue
        rg = gt[j].compose(gt[i].inverse())
        re = est[j].compose(est[i].inverse())
        err_r = np.degrees(rotation_angle(re.R @ rg.R.T))
        bg, be = np.linalg.norm(rg.t), np.linalg.norm(re.t)
        if bg < tiny_gt:
            err_t = 0.0
        elif be < tiny_est:
            err_t = 180.0
        else:
            err_t = _angle_between(re.t, rg.t)
        out[(i, j)] = float(max(err_r, err_t))
    return out


def auc(errors: Sequence[float], threshold: float) -> float:
    """(1/tau) * integral over [0, tau] of the recall curve, exactly: each
    error e contributes max(0, tau - e) / N."""
    e = np.asarray(list(errors), dtype=float)
    if not len(e):
        return 0.0
    return float(np.maximum(threshold - e, 0.0).sum() / (len(e) * threshold))


def evaluate_poses(gt: Mapping[str, PoseSE3], est: Mapping[str, PoseSE3],
                   thresholds: Sequence[float] = (1.0, 5.0, 20.0)) -> Dict[float, float]:
    errs = list(pairwise_errors(gt, est).values())
    return {float(t): auc(errs, t) for t in thresholds}
