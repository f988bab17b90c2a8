import numpy as np
import pytest

from monosfm.config import PipelineConfig
from monosfm.consistency import (CONSISTENT, INCONSISTENT, OCCLUDED, DepthBuffer, check_view, inconsistency_ratio,
                                 label_raster, reproject_depth)
from monosfm.geometry import CameraIntrinsics, PoseSE3, so3_exp
from monosfm.graph import build_graph
from monosfm.state import Frame, ReconstructionState

K = CameraIntrinsics(50.0, 50.0, 23.5, 17.5, 48, 36)


def _plane(d, K=K):
    return np.full((K.height, K.width), float(d))


def _beta(Pi, Di, Si, Pc, Dc, Sc, gamma=3.0, r=1):
    bi = reproject_depth(K, Pc, Dc, Sc, K, Pi, r)
    bc = reproject_depth(K, Pi, Di, Si, K, Pc, r)
    return inconsistency_ratio(Di, Si, bi, Dc, Sc, bc, gamma)


def test_identity_warp_reproduces_depth():
    rng = np.random.default_rng(0)
    D = 2.0 + rng.uniform(0, 0.5, (K.height, K.width))
    buf = reproject_depth(K, PoseSE3.identity(), D, 0.05 * D, K, PoseSE3.identity(), radius=0)
    assert np.array_equal(buf.depth, D)
    assert _beta(PoseSE3.identity(), D, 0.05 * D, PoseSE3.identity(), D, 0.05 * D) == 0.0


def test_forward_translation_consistent():
    # source moved delta towards a fronto-parallel plane at depth d sees it at d - delta
    d, delta = 3.0, 0.4
    Pc = PoseSE3(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, -delta]))
    buf = reproject_depth(K, Pc, _plane(d - delta), _plane(0.05), K, PoseSE3.identity())
    cov = buf.covered
    assert cov.sum() > 0.5 * cov.size
    assert np.allclose(buf.depth[cov], d, atol=1e-12)


def test_min_rule():
    D = _plane(4.0)
    D[:, :24] = 2.0
    buf = reproject_depth(K, PoseSE3.identity(), D, 0.05 * D, K, PoseSE3.identity(), radius=1)
    # the 3x3 footprint spreads the near half one column into the far half
    assert np.all(buf.depth[:, 24] == 2.0)
    assert np.all(buf.depth[:, 26:] == 4.0)


def test_beta_saturates_at_two():
    # full coverage with every reprojection in front beyond gamma on both sides
    Di, Dc = _plane(2.0), _plane(2.0)
    S = _plane(0.01)
    half = DepthBuffer(_plane(1.0), _plane(0.01))
    assert inconsistency_ratio(Di, S, half, Dc, S, half, 3.0) == 2.0


def test_halved_depth_is_one_sided():
    P = PoseSE3.identity()
    D = _plane(2.0)
    # c's surface in front of i's: a violation in i, occlusion seen from c
    assert _beta(P, D, 0.01 * D, P, 0.5 * D, 0.005 * D) == pytest.approx(1.0)


def test_occlusion_ignored():
    P = PoseSE3.identity()
    D = _plane(2.0)
    lab = label_raster(D, 0.01 * D, reproject_depth(K, P, 2 * D, 0.02 * D, K, P), 3.0)
    assert np.all(lab == OCCLUDED)
    bi = reproject_depth(K, P, 2 * D, 0.02 * D, K, P)
    none = DepthBuffer(np.full(D.shape, np.nan), np.full(D.shape, np.nan))
    assert inconsistency_ratio(D, 0.01 * D, bi, 2 * D, 0.02 * D, none, 3.0) == 0.0


def test_label_values():
    D = _plane(2.0)
    buf = DepthBuffer(_plane(2.0), _plane(0.01))
    buf.depth[0, 0] = 1.0
    buf.depth[0, 1] = 3.0
    buf.depth[0, 2] = np.nan
    lab = label_raster(D, _plane(0.01), buf, 3.0)
    assert lab[0, 0] == INCONSISTENT and lab[0, 1] == OCCLUDED and np.isnan(lab[0, 2]) and lab[1, 1] == CONSISTENT


def _two_views(rng):
    Pi = PoseSE3.identity()
    Pc = PoseSE3.from_Rt(so3_exp([0.0, 0.08, 0.0]), np.array([-0.3, 0.0, 0.05]))
    Di = 2.0 + rng.uniform(0, 1.0, (K.height, K.width))
    Dc = 2.0 + rng.uniform(0, 1.0, (K.height, K.width))
    return Pi, Di, 0.02 * Di, Pc, Dc, 0.02 * Dc


def test_beta_symmetric_and_bounded():
    rng = np.random.default_rng(1)
    Pi, Di, Si, Pc, Dc, Sc = _two_views(rng)
    b1 = _beta(Pi, Di, Si, Pc, Dc, Sc)
    b2 = _beta(Pc, Dc, Sc, Pi, Di, Si)
    assert b1 == b2
    assert 0.0 < b1 <= 2.0


def test_beta_scale_invariant():
    rng = np.random.default_rng(2)
    Pi, Di, Si, Pc, Dc, Sc = _two_views(rng)
    k = 4.0
    Pc2 = PoseSE3(Pc.rotation, k * Pc.translation)
    assert _beta(Pi, Di, Si, Pc, Dc, Sc) == _beta(Pi, k * Di, k * Si, Pc2, k * Dc, k * Sc)


def test_beta_monotone_in_gamma():
    rng = np.random.default_rng(3)
    views = _two_views(rng)
    betas = [_beta(*views, gamma=g) for g in (0.5, 1.0, 2.0, 3.0, 5.0, 10.0)]
    assert all(b <= a for a, b in zip(betas, betas[1:]))


def test_check_view_without_partners_accepts():
    kps = {"a": np.array([[10.0, 10.0, 1.0]]), "b": np.array([[10.0, 10.0, 1.0]])}
    frames = {k: Frame(k, K, kps[k], _plane(2.0), _plane(0.0), np.dstack([_plane(0), _plane(0), _plane(-1)]),
                       _plane(0.01)) for k in kps}
    st = ReconstructionState(frames, build_graph(kps, []), PipelineConfig())
    for k in kps:
        st.frames[k].pose = PoseSE3.identity()
        st.frames[k].apply_scale(1.0, st.config)
    res = check_view(st, "b")
    assert res.accepted and res.ratios == {}
