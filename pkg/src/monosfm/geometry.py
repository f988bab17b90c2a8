"""Pinhole cameras, rigid transforms, rasters and the projection primitives.

Conventions: poses map world to camera coordinates, the camera looks down +z,
and a pixel (u, v) with depth d lifts to ((u - cx) d / fx, (v - cy) d / fy, d)
in the camera frame. Pixel (u, v) addresses column u and row v of a raster.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CheiralityViolation,
    InvalidDepth,
    InvalidNeighbor,
    OutOfBounds,
    ValidationError,
)


# ---------------------------------------------------------------------------
# rotations


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the quaternion with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-10:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1 - np.cos(theta)) / theta**2 * W @ W


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    if c > 0.999:
        # arccos is ill-conditioned near zero; use the skew part instead
        s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
        return float(np.arcsin(min(s, 1.0)))
    return float(np.arccos(c))


def rotation_about(axis: Sequence[float], angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=float)
    return so3_exp(a / np.linalg.norm(a) * angle)


# ---------------------------------------------------------------------------
# camera types


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(f"principal point ({self.cx}, {self.cy}) outside image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (uv[..., 0] >= 0) & (uv[..., 0] <= self.width - 1) & (uv[..., 1] >= 0) & (uv[..., 1] <= self.height - 1)

    def pixel_rays(self) -> np.ndarray:
        """Per-pixel ray (x/z, y/z, 1) as an (H, W, 3) array."""
        u, v = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """World-to-camera rigid transform with a unit quaternion (w, x, y, z)."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not n > 0:
            raise ValidationError("zero quaternion")
        # leave already-unit quaternions untouched so text round-trips are exact
        if abs(n - 1.0) > 4e-16:
            q = q / n
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3).copy())
        object.__setattr__(self, "_R", quat_to_matrix(q))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_Rt(cls, R: np.ndarray, t: np.ndarray) -> "PoseSE3":
        return cls(matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return self._R

    @property
    def t(self) -> np.ndarray:
        return self.translation

    @property
    def matrix(self) -> np.ndarray:
        """3x4 [R | t]."""
        return np.hstack([self._R, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        return -self._R.T @ self.translation

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self._R.T + self.translation

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self * other: first apply `other`, then `self`."""
        q = quat_multiply(self.rotation, other.rotation)
        return PoseSE3(q, self._R @ other.translation + self.translation)

    __mul__ = compose

    def inverse(self) -> "PoseSE3":
        qc = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return PoseSE3(qc, -(self._R.T @ self.translation))

    def perturbed(self, omega: np.ndarray, dt: np.ndarray) -> "PoseSE3":
        """Left update R <- exp(omega) R, t <- t + dt (the LM parametrization)."""
        dq = matrix_to_quat(so3_exp(omega))
        return PoseSE3(quat_multiply(dq, self.rotation), self.translation + dt)

    def scaled(self, s: float) -> "PoseSE3":
        return PoseSE3(self.rotation, self.translation * s)

    def __repr__(self):
        return f"PoseSE3(q={np.round(self.rotation, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


class Raster:
    """W x H grid of float32 values with NaN marking invalid pixels."""

    def __init__(self, data: np.ndarray):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValidationError(f"raster must be 2-D or 3-D, got shape {data.shape}")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def values(self) -> np.ndarray:
        """(H, W) for single-channel rasters, (H, W, C) otherwise."""
        return self.data[:, :, 0] if self.channels == 1 else self.data

    @property
    def valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.data), axis=2)

    def __eq__(self, other):
        return isinstance(other, Raster) and self.data.shape == other.data.shape and \
            self.data.tobytes() == other.data.tobytes()

    def __repr__(self):
        return f"Raster({self.width}x{self.height}x{self.channels})"


@dataclass(frozen=True, eq=False)
class Observation:
    image_id: str
    xy: np.ndarray
    cov: np.ndarray = field(default_factory=lambda: np.eye(2))
    keypoint: int = -1
    prior_depth: Optional[float] = None
    prior_depth_var: Optional[float] = None


@dataclass(eq=False)
class ScenePoint:
    """A reconstructed point. Mutable because bundle adjustment moves it."""

    position: np.ndarray
    track: list  # of (image_id, keypoint index)
    provenance: str = "triangulated"  # or "lifted"
    covariance: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if len(self.track) < 1:
            raise ValidationError("scene point needs at least one observation")
        if self.provenance not in ("triangulated", "lifted"):
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        self.position = np.asarray(self.position, dtype=float)


# ---------------------------------------------------------------------------
# projection and lifting


def camera_depth(P: PoseSE3, X: np.ndarray) -> float:
    return float(P.R[2] @ np.asarray(X, dtype=float) + P.t[2])


def project(K: CameraIntrinsics, P: PoseSE3, X: np.ndarray) -> np.ndarray:
    x, y, z = P.apply(X)
    if not z > 0:
        raise CheiralityViolation(f"point at camera depth {z} is not in front of the camera")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def lift(K: CameraIntrinsics, P: PoseSE3, x: np.ndarray, d: float) -> np.ndarray:
    if not (np.isfinite(d) and d > 0):
        raise InvalidDepth(f"depth must be positive and finite, got {d}")
    u, v = x
    if not K.contains(np.array([u, v])):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {K.width}x{K.height} image")
    Xc = np.array([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d])
    return P.R.T @ (Xc - P.t)


def project_points(K: CameraIntrinsics, P: PoseSE3, X: np.ndarray):
    """Vectorized projection. Returns (uv[N,2], z[N]); uv is NaN where z <= 0."""
    Xc = P.apply(np.atleast_2d(X))
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * Xc[:, 0] / z + K.cx, K.fy * Xc[:, 1] / z + K.cy], axis=1)
    uv[z <= 0] = np.nan
    return uv, z


def lift_pixels(K: CameraIntrinsics, P: PoseSE3, uv: np.ndarray, d: np.ndarray) -> np.ndarray:
    uv = np.atleast_2d(uv)
    d = np.asarray(d, dtype=float)
    Xc = np.stack([(uv[:, 0] - K.cx) * d / K.fx, (uv[:, 1] - K.cy) * d / K.fy, d], axis=1)
    return (Xc - P.t) @ P.R


def point_depth_covariance(P: PoseSE3, cov_X: np.ndarray) -> float:
    r3 = P.R[2]
    return float(r3 @ np.asarray(cov_X, dtype=float) @ r3)


# ---------------------------------------------------------------------------
# raster sampling


def _bilinear_setup(width: int, height: int, u: np.ndarray, v: np.ndarray):
    u0 = np.clip(np.floor(u).astype(int), 0, max(width - 2, 0))
    v0 = np.clip(np.floor(v).astype(int), 0, max(height - 2, 0))
    du = u - u0
    dv = v - v0
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    return u0, v0, u1, v1, du, dv


def interpolate(R: Raster, x: np.ndarray):
    """Bilinear sample at pixel x = (u, v); normals are renormalized."""
    u, v = float(x[0]), float(x[1])
    if not (0 <= u <= R.width - 1 and 0 <= v <= R.height - 1):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {R.width}x{R.height} raster")
    u0, v0, u1, v1, du, dv = _bilinear_setup(R.width, R.height, np.array(u), np.array(v))
    d = R.data
    corners = np.stack([d[v0, u0], d[v0, u1], d[v1, u0], d[v1, u1]])
    if not np.all(np.isfinite(corners)):
        raise InvalidNeighbor(f"NaN neighbor around pixel ({u}, {v})")
    w = np.array([(1 - du) * (1 - dv), du * (1 - dv), (1 - du) * dv, du * dv])
    val = (w[:, None] * corners.astype(float)).sum(axis=0)
    if R.channels == 3:
        val = val / np.linalg.norm(val)
        return val
    return float(val[0]) if R.channels == 1 else val


def sample_bilinear(arr: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling of an (H, W) array; NaN where any neighbor
    is invalid or the point is outside the image."""
    H, W = arr.shape[:2]
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    u, v = uv[:, 0], uv[:, 1]
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    out = np.full(len(u), np.nan)
    if not inside.any():
        return out
    ui, vi = u[inside], v[inside]
    u0, v0, u1, v1, du, dv = _bilinear_setup(W, H, ui, vi)
    a = np.asarray(arr, dtype=float)
    out[inside] = ((1 - du) * (1 - dv) * a[v0, u0] + du * (1 - dv) * a[v0, u1]
                   + (1 - du) * dv * a[v1, u0] + du * dv * a[v1, u1])
    return out


def bilinear_weights(width: int, height: int, uv: np.ndarray):
    """Indices (N,4) into a flattened W*H raster and matching weights (N,4)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    u0, v0, u1, v1, du, dv = _bilinear_setup(width, height, uv[:, 0], uv[:, 1])
    idx = np.stack([v0 * width + u0, v0 * width + u1, v1 * width + u0, v1 * width + u1], axis=1)
    w = np.stack([(1 - du) * (1 - dv), du * (1 - dv), (1 - du) * dv, du * dv], axis=1)
    return idx, w


def triangulation_angle(c1: np.ndarray, c2: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Angle (radians) subtended at X by camera centers c1 and c2; X may be (N,3)."""
    r1 = np.atleast_2d(X) - c1
    r2 = np.atleast_2d(X) - c2
    n = np.linalg.norm(r1, axis=1) * np.linalg.norm(r2, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.einsum("ij,ij->i", r1, r2) / n
    c = np.where(n > 0, np.clip(c, -1.0, 1.0), 1.0)
    return np.arccos(c)
