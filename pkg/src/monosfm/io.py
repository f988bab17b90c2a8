"""Scene directory parsing, raster files and result serialization."""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ParseError, ValidationError
from .geometry import CameraIntrinsics, PoseSE3
from .graph import PairMatches

MAGIC = b"MPR1"
_HEADER = struct.Struct("<4sIIII")


# ---------------------------------------------------------------------------
# atomic writes


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# rasters


def encode_raster(arr: np.ndarray) -> bytes:
    a = np.asarray(arr, dtype="<f4")
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValidationError(f"raster must be (H, W) or (H, W, C), got shape {a.shape}")
    h, w, c = a.shape
    return _HEADER.pack(MAGIC, w, h, c, 0) + np.ascontiguousarray(a).tobytes()


def decode_raster(data: bytes, path="<bytes>") -> np.ndarray:
    """Returns float32 (H, W, C)."""
    if len(data) < _HEADER.size:
        raise ParseError(path, f"byte {len(data)}", f"header needs {_HEADER.size} bytes")
    magic, w, h, c, reserved = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ParseError(path, "byte 0", f"bad magic {magic!r}")
    if reserved != 0:
        raise ParseError(path, "byte 16", "reserved header field must be 0")
    need = _HEADER.size + 4 * w * h * c
    if len(data) != need:
        raise ParseError(path, f"byte {len(data)}", f"payload expected {need} bytes in total for {w}x{h}x{c}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w, c).astype(np.float32)


def write_raster(path: Path, arr: np.ndarray) -> None:
    atomic_write_bytes(path, encode_raster(arr))


def read_raster(path: Path) -> np.ndarray:
    return decode_raster(Path(path).read_bytes(), path)


# ---------------------------------------------------------------------------
# scene directory


@dataclass
class Scene:
    cameras: Dict[str, CameraIntrinsics]
    depth: Dict[str, np.ndarray]           # (H, W)
    normal: Dict[str, np.ndarray]          # (H, W, 3), unit length where valid
    depth_sigma: Dict[str, np.ndarray]     # (H, W) raw, as provided
    normal_sigma: Dict[str, np.ndarray]    # (H, W) radians
    keypoints: Dict[str, np.ndarray]       # (N, 3): u, v, sigma_px
    matches: List[PairMatches] = field(default_factory=list)

    @property
    def images(self) -> List[str]:
        return sorted(self.cameras)


def _tokens(path: Path):
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _num(path, lineno, tok, kind=float):
    try:
        return kind(tok)
    except ValueError:
        raise ParseError(path, f"line {lineno}", f"expected {kind.__name__}, got {tok!r}") from None


def read_cameras(path: Path):
    path = Path(path)
    out = {}
    for lineno, tok in _tokens(path):
        if len(tok) != 11:
            raise ParseError(path, f"line {lineno}", f"expected 11 fields, got {len(tok)}")
        img = tok[0]
        if img in out:
            raise ValidationError(f"duplicate image id {img!r} in {path}")
        fx, fy, cx, cy = (_num(path, lineno, t) for t in tok[1:5])
        w, h = (_num(path, lineno, t, int) for t in tok[5:7])
        try:
            K = CameraIntrinsics(fx, fy, cx, cy, w, h)
        except ValidationError as e:
            raise ValidationError(f"image {img}: {e}") from None
        out[img] = (K, tok[7:11])
    return out


def read_keypoints(path: Path) -> np.ndarray:
    path = Path(path)
    rows = []
    for lineno, tok in _tokens(path):
        if len(tok) != 4:
            raise ParseError(path, f"line {lineno}", f"expected 4 fields, got {len(tok)}")
        idx = _num(path, lineno, tok[0], int)
        if idx != len(rows):
            raise ParseError(path, f"line {lineno}", f"keypoint index {idx}, expected {len(rows)}")
        u, v, s = (_num(path, lineno, t) for t in tok[1:])
        if not s > 0:
            raise ValidationError(f"{path.name}: keypoint {idx} has non-positive sigma")
        rows.append((u, v, s))
    return np.array(rows, dtype=float).reshape(-1, 3)


def read_matches(path: Path) -> List[PairMatches]:
    path = Path(path)
    out = []
    lines = list(_tokens(path))
    k = 0
    while k < len(lines):
        lineno, tok = lines[k]
        if tok[0] != "PAIR" or len(tok) != 4:
            raise ParseError(path, f"line {lineno}", "expected 'PAIR a b n'")
        a, b = tok[1], tok[2]
        n = _num(path, lineno, tok[3], int)
        if n < 0 or k + n > len(lines) - 1:
            raise ParseError(path, f"line {lineno}", f"block declares {n} matches, file ends early")
        m = np.zeros((n, 3))
        for r in range(n):
            ln, t = lines[k + 1 + r]
            if len(t) != 3 or t[0] == "PAIR":
                raise ParseError(path, f"line {ln}", "expected 'idx_a idx_b score'")
            m[r] = (_num(path, ln, t[0], int), _num(path, ln, t[1], int), _num(path, ln, t[2]))
        out.append(PairMatches(a, b, m))
        k += n + 1
    return out


def load_scene(path: Path) -> Scene:
    root = Path(path)
    if not root.is_dir():
        raise ValidationError(f"scene directory {root} does not exist")
    cams = read_cameras(root / "cameras.txt")
    cameras, depth, normal, dsig, nsig, kps = {}, {}, {}, {}, {}, {}
    for img, (K, files) in sorted(cams.items()):
        cameras[img] = K
        rasters = []
        for name, fname, chans in zip(("depth", "normal", "depth_sigma", "normal_sigma"), files, (1, 3, 1, 1)):
            r = read_raster(root / fname)
            if r.shape[:2] != (K.height, K.width):
                raise ValidationError(f"image {img}: {name} raster is {r.shape[1]}x{r.shape[0]}, "
                                      f"manifest says {K.width}x{K.height}")
            if r.shape[2] != chans:
                raise ValidationError(f"image {img}: {name} raster has {r.shape[2]} channels, expected {chans}")
            rasters.append(r.astype(float))
        d, n, ds, ns = rasters
        d = d[:, :, 0]
        d[~(d > 0)] = np.nan
        norm = np.linalg.norm(n, axis=2, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            n = n / norm
        n[~np.isfinite(n).all(axis=2) | (norm[:, :, 0] == 0)] = np.nan
        depth[img], normal[img], dsig[img], nsig[img] = d, n, ds[:, :, 0], ns[:, :, 0]
        kp_path = root / f"keypoints_{img}.txt"
        kps[img] = read_keypoints(kp_path) if kp_path.exists() else np.zeros((0, 3))
    matches = read_matches(root / "matches.txt") if (root / "matches.txt").exists() else []
    for pm in matches:
        for img in (pm.a, pm.b):
            if img not in cameras:
                raise ValidationError(f"matches reference image {img!r} missing from the manifest")
    return Scene(cameras, depth, normal, dsig, nsig, kps, matches)


def write_scene(scene: Scene, path: Path) -> None:
    root = Path(path)
    lines = ["# image_id fx fy cx cy width height depth normal depth_sigma normal_sigma\n"]
    for img in scene.images:
        K = scene.cameras[img]
        files = [f"depth_{img}.mpr", f"normal_{img}.mpr", f"depth_sigma_{img}.mpr", f"normal_sigma_{img}.mpr"]
        for f, arr in zip(files, (scene.depth[img], scene.normal[img], scene.depth_sigma[img], scene.normal_sigma[img])):
            write_raster(root / f, arr)
        lines.append(f"{img} {K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height} {' '.join(files)}\n")
        kp = scene.keypoints[img]
        atomic_write_text(root / f"keypoints_{img}.txt",
                          "".join(f"{i} {u!r} {v!r} {s!r}\n" for i, (u, v, s) in enumerate(kp.tolist())))
    atomic_write_text(root / "cameras.txt", "".join(lines))
    out = []
    for pm in scene.matches:
        out.append(f"PAIR {pm.a} {pm.b} {len(pm.matches)}\n")
        out.extend(f"{int(a)} {int(b)} {s!r}\n" for a, b, s in pm.matches.tolist())
    atomic_write_text(root / "matches.txt", "".join(out))


# ---------------------------------------------------------------------------
# poses and points


def format_poses(poses: Dict[str, PoseSE3], status: Optional[str] = None) -> str:
    lines = []
    if status is not None:
        lines.append(f"# status={status}\n")
    lines.append("# image_id qw qx qy qz tx ty tz\n")
    for img in sorted(poses):
        P = poses[img]
        vals = " ".join(f"{x:.17g}" for x in (*P.rotation, *P.translation))
        lines.append(f"{img} {vals}\n")
    return "".join(lines)


def write_poses(path: Path, poses: Dict[str, PoseSE3], status: Optional[str] = None) -> None:
    atomic_write_text(path, format_poses(poses, status))


def read_poses(path: Path) -> Tuple[Dict[str, PoseSE3], str]:
    path = Path(path)
    poses, status = {}, "OK"
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if line.startswith("#"):
            if line[1:].strip().startswith("status="):
                status = line[1:].strip()[len("status="):]
            continue
        if not line:
            continue
        tok = line.split()
        if len(tok) != 8:
            raise ParseError(path, f"line {lineno}", f"expected 8 fields, got {len(tok)}")
        v = [_num(path, lineno, t) for t in tok[1:]]
        poses[tok[0]] = PoseSE3(np.array(v[:4]), np.array(v[4:]))
    return poses, status


def save_reconstruction(state, path: Path) -> None:
    """poses.txt, points3D.txt, refined depth rasters and events.log."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    status = None if state.status == "OK" else state.status
    poses = {img: state.frames[img].pose for img in state.registered}
    write_poses(root / "poses.txt", poses, status)
    lines = []
    if status is not None:
        lines.append(f"# status={status}\n")
    lines.append("# point_id x y z provenance track_length mean_reproj_err\n")
    for pid in sorted(state.points):
        pt = state.points[pid]
        errs = []
        for img, kp in pt.track:
            f = state.frames[img]
            if not f.registered:
                continue
            Xc = f.pose.apply(pt.position)
            uv = np.array([f.K.fx * Xc[0] / Xc[2] + f.K.cx, f.K.fy * Xc[1] / Xc[2] + f.K.cy])
            errs.append(float(np.linalg.norm(uv - f.keypoints[kp, :2])))
        x, y, z = pt.position
        lines.append(f"{pid} {x:.17g} {y:.17g} {z:.17g} {pt.provenance} {len(pt.track)} "
                     f"{(np.mean(errs) if errs else 0.0):.17g}\n")
    atomic_write_text(root / "points3D.txt", "".join(lines))
    for img in sorted(state.registered):
        f = state.frames[img]
        if f.depth_refined is not None:
            write_raster(root / f"depth_refined_{img}.mpr", f.depth_refined)
    atomic_write_text(root / "events.log", "".join(e.line() + "\n" for e in state.events))


def read_points(path: Path) -> Dict[int, Tuple[np.ndarray, str, int, float]]:
    path = Path(path)
    out = {}
    for lineno, tok in _tokens(path):
        if len(tok) != 7:
            raise ParseError(path, f"line {lineno}", f"expected 7 fields, got {len(tok)}")
        pid = _num(path, lineno, tok[0], int)
        xyz = np.array([_num(path, lineno, t) for t in tok[1:4]])
        out[pid] = (xyz, tok[4], _num(path, lineno, tok[5], int), _num(path, lineno, tok[6]))
    return out
