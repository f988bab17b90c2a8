"""Synthetic scenes with analytic ground truth.

Geometry is a handful of rectangles and spheres. Depth and normals are ray
cast per pixel; keypoints are projections of random surface samples, and two
keypoints match when their samples share an appearance id. A duplicated
object reuses the appearance ids of the original, which is how the symmetric
preset plants wrong associations.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import PresetInvalid
from .geometry import CameraIntrinsics, PoseSE3, rotation_about
from .graph import PairMatches
from .io import Scene, atomic_write_text, write_poses, write_raster, write_scene

# ---------------------------------------------------------------------------
# primitives


@dataclass
class Rect:
    center: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    a: float
    b: float

    @property
    def normal(self):
        return np.cross(self.e1, self.e2)

    @property
    def area(self):
        return 4 * self.a * self.b

    def intersect(self, O, D):
        n = self.normal
        dn = D @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - O) @ n) / dn
        P = O + t[:, None] * D
        rel = P - self.center
        inside = (np.abs(rel @ self.e1) <= self.a) & (np.abs(rel @ self.e2) <= self.b)
        return np.where(inside & (t > 1e-9) & np.isfinite(t), t, np.inf)

    def normals_at(self, P):
        return np.broadcast_to(self.normal, P.shape).copy()

    def sample(self, rng, n):
        s = rng.uniform(-1, 1, (n, 2))
        return self.center + s[:, :1] * self.a * self.e1 + s[:, 1:] * self.b * self.e2

    def transformed(self, R, t):
        return Rect(R @ self.center + t, R @ self.e1, R @ self.e2, self.a, self.b)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    frame: np.ndarray = field(default_factory=lambda: np.eye(3))   # orientation of the sample layout

    @property
    def area(self):
        return 4 * np.pi * self.radius**2

    def intersect(self, O, D):
        oc = O - self.center
        a = np.einsum("ij,ij->i", D, D)
        b = 2 * D @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0))
        t1 = (-b - sq) / (2 * a)
        t2 = (-b + sq) / (2 * a)
        t = np.where(t1 > 1e-9, t1, np.where(t2 > 1e-9, t2, np.inf))
        return np.where(disc >= 0, t, np.inf)

    def normals_at(self, P):
        return (P - self.center) / self.radius

    def sample(self, rng, n):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius * d

    def transformed(self, R, t):
        return Sphere(R @ self.center + t, self.radius, R @ self.frame)


def box(center, size, open_bottom=True) -> List[Rect]:
    """Axis-aligned box as rectangles (y points down; the bottom face is skipped)."""
    c = np.asarray(center, dtype=float)
    sx, sy, sz = np.asarray(size, dtype=float) / 2
    X, Y, Z = np.eye(3)
    faces = [
        Rect(c - sz * Z, X, Y, sx, sy), Rect(c + sz * Z, X, Y, sx, sy),
        Rect(c - sx * X, Z, Y, sz, sy), Rect(c + sx * X, Z, Y, sz, sy),
        Rect(c - sy * Y, X, Z, sx, sz),
    ]
    if not open_bottom:
        faces.append(Rect(c + sy * Y, X, Z, sx, sz))
    return faces


def look_at(center, target) -> PoseSE3:
    C = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - C
    z /= np.linalg.norm(z)
    up = np.array([0.0, -1.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return PoseSE3.from_Rt(R, -R @ C)


@dataclass
class World:
    prims: list = field(default_factory=list)
    density: list = field(default_factory=list)     # samples per unit area
    appearance: list = field(default_factory=list)  # None or primitive index whose ids are reused
    group: list = field(default_factory=list)

    def add(self, prims, density, group="scene", copy_of=None):
        for k, p in enumerate(prims):
            self.prims.append(p)
            self.density.append(density)
            self.appearance.append(None if copy_of is None else copy_of[k])
            self.group.append(group)

    def cast(self, O, D):
        """Nearest hit distance along D (in units of D) and primitive index."""
        ts = np.stack([p.intersect(O, D) for p in self.prims], axis=1)
        k = np.argmin(ts, axis=1)
        return ts[np.arange(len(D)), k], k


# ---------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class SynthPreset:
    name: str
    layout: str                  # orbit | chain | forward | symmetric
    n_images: int = 8
    width: int = 128
    height: int = 96
    focal: float = 100.0
    kp_noise_px: float = 0.0
    depth_noise: float = 0.0     # relative, per pixel
    depth_bias: float = 0.0      # amplitude of the smooth multiplicative field
    normal_noise_deg: float = 0.0
    outlier_frac: float = 0.0
    max_views_per_sample: Optional[int] = None
    max_keypoints: int = 600
    min_pair_matches: int = 8
    density_scale: float = 1.0   # multiplies the surface sample density of every primitive

    def validate(self):
        ok = (self.layout in ("orbit", "chain", "forward", "symmetric") and self.n_images >= 2
              and self.width >= 8 and self.height >= 8 and self.focal > 0
              and min(self.kp_noise_px, self.depth_noise, self.depth_bias, self.normal_noise_deg) >= 0
              and 0 <= self.outlier_frac < 1 and self.depth_noise < 0.5
              and self.density_scale > 0)
        if not ok:
            raise PresetInvalid(f"preset {self.name!r} has out-of-range parameters")
        return self


_NOISY = dict(kp_noise_px=0.5, depth_noise=0.03, depth_bias=0.0, normal_noise_deg=3.0, outlier_frac=0.05)

_BASE = {
    "orbit-hi-overlap": SynthPreset("orbit-hi-overlap", "orbit", n_images=8),
    "chain-low-overlap": SynthPreset("chain-low-overlap", "chain", n_images=8, width=256, height=192, focal=200.0,
                                      max_views_per_sample=2),
    "forward-low-parallax": SynthPreset("forward-low-parallax", "forward", n_images=6, width=256, height=192,
                                         focal=200.0, max_keypoints=1500, density_scale=2.0),
    "symmetric-rooms": SynthPreset("symmetric-rooms", "symmetric", n_images=7),
}

PRESET_NAMES = sorted(list(_BASE) + [k + "-noisy" for k in _BASE])


def get_preset(name: str) -> SynthPreset:
    """`NAME` is the clean variant, `NAME-noisy` the noisy one."""
    if name in _BASE:
        return _BASE[name]
    if name.endswith("-noisy") and name[:-6] in _BASE:
        return replace(_BASE[name[:-6]], name=name, **_NOISY)
    raise PresetInvalid(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")


def _desk(world: World, rng, origin=np.zeros(3), R=np.eye(3), copy_of=None, group="object"):
    """Object cluster: two boxes and a sphere, placed by (R, origin)."""
    parts = box([-0.7, 0.35, 0.0], [1.0, 1.3, 1.0]) + box([0.9, 0.6, -0.4], [0.7, 0.8, 0.7]) \
        + [Sphere(np.array([0.2, 0.2, 0.6]), 0.55)]
    parts = [p.transformed(R, origin) for p in parts]
    world.add(parts, 60.0, group, copy_of)
    return parts


def _build(preset: SynthPreset, rng):
    world = World()
    X, Y, Z = np.eye(3)
    W, H, f = preset.width, preset.height, preset.focal
    poses: Dict[str, PoseSE3] = {}
    meta: dict = {}
    n = preset.n_images
    if preset.layout == "orbit":
        _desk(world, rng)
        world.add([Rect(np.array([0, 1.0, 0]), X, Z, 8, 8)], 6.0, "floor")
        world.add([Rect(np.array([0, -1.0, 4.0]), X, Y, 8, 5)], 6.0, "wall")
        for k, ang in enumerate(np.linspace(-30, 30, n)):
            a = np.deg2rad(ang)
            C = np.array([5.0 * np.sin(a), -1.6, -5.0 * np.cos(a)])
            poses[f"img{k:02d}"] = look_at(C, [0, 0.3, 0])
    elif preset.layout == "chain":
        spacing = 2.9
        L = spacing * (n - 1)
        world.add([Rect(np.array([L / 2, -0.5, 4.5]), X, Y, L / 2 + 6, 4)], 8.0, "wall")
        world.add([Rect(np.array([L / 2, 1.5, 2.0]), X, Z, L / 2 + 6, 4)], 8.0, "floor")
        for k in range(n + 1):
            xo = (k - 0.5) * spacing
            if k % 2:
                world.add(box([xo, 0.9, 3.2], [0.9, 1.2, 0.8]), 40.0, "object")
            else:
                world.add([Sphere(np.array([xo, 0.8, 3.0]), 0.6)], 40.0, "object")
        for k in range(n):
            C = np.array([k * spacing, -0.2 + 0.1 * np.sin(k), 0.0])
            T = C + np.array([0.25 * np.sin(1.7 * k), 0.3, 4.0])
            poses[f"img{k:02d}"] = look_at(C, T)
    elif preset.layout == "forward":
        world.add([Rect(np.array([0, 0, 22.0]), X, Y, 12, 6)], 1.5, "wall")
        world.add([Rect(np.array([0, 2.0, 10.0]), X, Z, 12, 14)], 2.0, "floor")
        world.add([Rect(np.array([-5.0, 0, 10.0]), Z, Y, 14, 6)], 2.0, "wall")
        world.add([Rect(np.array([5.0, 0, 10.0]), Z, Y, 14, 6)], 2.0, "wall")
        world.add(box([-1.8, 1.0, 8.0], [1.5, 2.0, 1.5]), 12.0, "object")
        world.add(box([2.2, 0.9, 11.0], [1.6, 2.2, 1.6]), 8.0, "object")
        world.add([Sphere(np.array([0.3, 0.6, 14.0]), 1.4)], 6.0, "object")
        world.add(box([-2.5, 0.0, 16.0], [2.0, 4.0, 2.0]), 5.0, "object")
        for k in range(n):
            C = np.array([0.0, -0.3, 0.2 * k])
            jitter = np.array([np.sin(2.1 * k), np.cos(1.3 * k), 0.0]) * 0.15
            poses[f"img{k:02d}"] = look_at(C, C + np.array([0, 0.25, 10.0]) + jitter)
    elif preset.layout == "symmetric":
        a_parts = _desk(world, rng, group="object_a")
        world.add([Rect(np.array([0, 1.0, 0]), X, Z, 8, 8)], 6.0, "floor_a")
        world.add([Rect(np.array([0, -1.0, 8.0]), X, Y, 10, 6)], 6.0, "wall_a")
        # the duplicate: same object, rotated and far away, with a wall right behind it
        Rb = rotation_about([0, 1, 0], np.deg2rad(70.0))
        ob = np.array([40.0, 0.0, 5.0])
        first = len(world.prims) - 2 - len(a_parts)
        _desk(world, rng, ob, Rb, copy_of=list(range(first, first + len(a_parts))), group="object_b")
        world.add([Rect(ob + Rb @ np.array([0, 1.0, 0]), Rb @ X, Rb @ Z, 8, 8)], 6.0, "floor_b")
        world.add([Rect(ob + Rb @ np.array([0, -1.0, 1.6]), Rb @ X, Rb @ Y, 10, 6)], 6.0, "wall_b")
        angles = np.linspace(-30, 30, n - 1)
        for k, ang in enumerate(angles):
            a = np.deg2rad(ang)
            C = np.array([5.0 * np.sin(a), -1.6, -5.0 * np.cos(a)])
            poses[f"img{k:02d}"] = look_at(C, [0, 0.3, 0])
        # decoy: in the duplicate's frame it sits between two orbit views
        a = np.deg2rad(0.5 * (angles[1] + angles[2]))
        local = look_at(np.array([5.0 * np.sin(a), -1.6, -5.0 * np.cos(a)]), [0, 0.3, 0])
        to_local = PoseSE3.from_Rt(Rb.T, -Rb.T @ ob)   # world -> duplicate frame
        poses[f"img{n - 1:02d}"] = local.compose(to_local)
        meta["decoy"] = f"img{n - 1:02d}"
        meta["decoy_wrong_pose"] = local
    K = CameraIntrinsics(f, f, (W - 1) / 2, (H - 1) / 2, W, H)
    return world, poses, K, meta


# ---------------------------------------------------------------------------
# generation


@dataclass
class SynthResult:
    scene: Scene
    poses_gt: Dict[str, PoseSE3]
    depth_gt: Dict[str, np.ndarray]
    normal_gt: Dict[str, np.ndarray]
    kp_sample: Dict[str, np.ndarray]      # keypoint -> sample index
    sample_group: np.ndarray               # sample -> group name
    sample_xyz: np.ndarray
    meta: dict


def _render(world: World, K: CameraIntrinsics, P: PoseSE3):
    rays = K.pixel_rays().reshape(-1, 3)
    D = rays @ P.R                      # world directions with unit camera z
    t, k = world.cast(P.center, D)
    depth = np.where(np.isfinite(t), t, np.nan)
    pts = P.center + np.where(np.isfinite(t), t, 0)[:, None] * D
    nw = np.zeros_like(pts)
    for i, prim in enumerate(world.prims):
        sel = (k == i) & np.isfinite(t)
        if sel.any():
            nw[sel] = prim.normals_at(pts[sel])
    nc = nw @ P.R.T
    flip = np.einsum("ij,ij->i", nc, rays) > 0
    nc[flip] *= -1
    nc[~np.isfinite(depth)] = np.nan
    H, W = K.height, K.width
    return depth.reshape(H, W), nc.reshape(H, W, 3)


def _smooth_field(rng, H, W, amp):
    if amp == 0:
        return np.zeros((H, W))
    v, u = np.mgrid[0:H, 0:W] / max(H, W)
    out = np.zeros((H, W))
    for _ in range(3):
        kx, ky = rng.uniform(0.5, 2.0, 2)
        ph = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (kx * u + ky * v) + ph)
    return amp * out / 3


def _perturb_normals(rng, N, sigma_rad):
    if sigma_rad == 0:
        return N.copy()
    noise = rng.normal(scale=sigma_rad / np.sqrt(2), size=N.shape)
    noise -= np.sum(noise * N, axis=-1, keepdims=True) * N      # tangent plane
    out = N + noise
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def generate(preset, seed: int = 0) -> SynthResult:
    if isinstance(preset, str):
        preset = get_preset(preset)
    preset.validate()
    rng = np.random.default_rng(seed)
    world, poses, K, meta = _build(preset, np.random.default_rng(1234))
    images = sorted(poses)

    # surface samples; duplicates copy the sample layout of their source primitive
    srng = np.random.default_rng(4321)
    xyz, app, grp = [], [], []
    base_samples: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    next_app = 0
    for i, prim in enumerate(world.prims):
        src = world.appearance[i]
        if src is None:
            m = max(1, int(round(prim.area * world.density[i] * preset.density_scale)))
            pts = prim.sample(srng, m)
            ids = np.arange(next_app, next_app + m)
            next_app += m
            base_samples[i] = (pts, ids)
        else:
            pts_src, ids = base_samples[src]
            # same local layout: map through the rigid transform between the copies
            pts = _map_copy(world.prims[src], prim, pts_src)
        xyz.append(pts)
        app.append(ids)
        grp += [world.group[i]] * len(pts)
    xyz = np.concatenate(xyz)
    app = np.concatenate(app)
    grp = np.array(grp, dtype=object)

    W, H = K.width, K.height
    depth_gt, normal_gt = {}, {}
    depth, normal, dsig, nsig, kps, kp_sample = {}, {}, {}, {}, {}, {}
    uses = np.zeros(len(xyz), dtype=int)
    for img in images:
        P = poses[img]
        Dt, Nt = _render(world, K, P)
        depth_gt[img], normal_gt[img] = Dt, Nt
        # priors: unknown global scale, smooth bias and per-pixel noise
        scale = float(rng.uniform(0.6, 1.6))
        field_ = _smooth_field(rng, H, W, preset.depth_bias)
        noise = rng.normal(size=(H, W)) * preset.depth_noise
        Dp = Dt * np.exp(field_) * (1 + noise) * scale
        depth[img] = Dp
        dsig[img] = np.where(np.isfinite(Dp), max(preset.depth_noise, 0.01) * Dp, np.nan)
        normal[img] = _perturb_normals(rng, Nt, np.deg2rad(preset.normal_noise_deg))
        nsig[img] = np.where(np.isfinite(Dt), np.deg2rad(max(preset.normal_noise_deg, 1.0)), np.nan)

        # visible samples
        Xc = P.apply(xyz)
        z = Xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([K.fx * Xc[:, 0] / z + K.cx, K.fy * Xc[:, 1] / z + K.cy], axis=1)
        cand = np.flatnonzero((z > 0.1) & (uv[:, 0] >= 2) & (uv[:, 0] <= W - 3)
                              & (uv[:, 1] >= 2) & (uv[:, 1] <= H - 3))
        if len(cand):
            Dw = np.hstack([(uv[cand] - [K.cx, K.cy]) / [K.fx, K.fy], np.ones((len(cand), 1))]) @ P.R
            t, k = world.cast(P.center, Dw)
            vis = t >= z[cand] * (1 - 1e-7)
            # reject grazing views
            pts = xyz[cand]
            ray = pts - P.center
            ray /= np.linalg.norm(ray, axis=1, keepdims=True)
            nrm = np.stack([world.prims[kk].normals_at(p[None])[0] for kk, p in zip(k, pts)])
            vis &= np.abs(np.einsum("ij,ij->i", ray, nrm)) > 0.2
            cand = cand[vis]
        if preset.max_views_per_sample is not None:
            cand = cand[uses[cand] < preset.max_views_per_sample]
        # one keypoint per appearance id per image
        _, first = np.unique(app[cand], return_index=True)
        cand = np.sort(cand[first])
        if len(cand) > preset.max_keypoints:
            cand = np.sort(rng.choice(cand, preset.max_keypoints, replace=False))
        uses[cand] += 1
        obs = uv[cand] + rng.normal(size=(len(cand), 2)) * preset.kp_noise_px
        kps[img] = np.hstack([obs, np.ones((len(cand), 1))])
        kp_sample[img] = cand

    inl = {}
    matched = {img: np.zeros(len(kps[img]), dtype=bool) for img in images}
    for ia, a in enumerate(images):
        for b in images[ia + 1:]:
            sa, sb = kp_sample[a], kp_sample[b]
            common, ka, kb = np.intersect1d(app[sa], app[sb], return_indices=True)
            if len(common) < preset.min_pair_matches:
                continue
            inl[(a, b)] = np.stack([ka, kb, rng.uniform(0.6, 1.0, len(common))], axis=1)
            matched[a][ka] = True
            matched[b][kb] = True
    # outliers pair up keypoints that no true match uses, each at most once,
    # so they never lengthen a track
    matches = []
    for (a, b), m in inl.items():
        n_out = int(round(preset.outlier_frac * len(m)))
        fa, fb = np.flatnonzero(~matched[a]), np.flatnonzero(~matched[b])
        n_out = min(n_out, len(fa), len(fb))
        if n_out:
            oa = rng.choice(fa, n_out, replace=False)
            ob = rng.choice(fb, n_out, replace=False)
            matched[a][oa] = True
            matched[b][ob] = True
            m = np.vstack([m, np.stack([oa, ob, rng.uniform(0.3, 0.9, n_out)], axis=1)])
        matches.append(PairMatches(a, b, m))

    cams = {img: K for img in images}
    scene = Scene(cams, depth, normal, dsig, nsig, kps, matches)
    meta["preset"] = preset.name
    meta["seed"] = seed
    return SynthResult(scene, poses, depth_gt, normal_gt, kp_sample, grp, xyz, meta)


def _map_copy(src, dst, pts):
    """Rigid map taking primitive `src` onto its copy `dst`, applied to pts."""
    if isinstance(src, Rect):
        A = np.stack([src.e1, src.e2, src.normal], axis=1)
        B = np.stack([dst.e1, dst.e2, dst.normal], axis=1)
        R = B @ A.T
    else:
        R = dst.frame @ src.frame.T
    return (pts - src.center) @ R.T + dst.center


def write_synth(result: SynthResult, out: Path) -> None:
    out = Path(out)
    write_scene(result.scene, out)
    write_poses(out / "poses_gt.txt", result.poses_gt)
    for img, D in result.depth_gt.items():
        write_raster(out / f"depth_gt_{img}.mpr", D)
    atomic_write_text(out / "synth.txt", "".join(f"{k} = {v}\n" for k, v in sorted(result.meta.items())
                                                 if not isinstance(v, PoseSE3)))
