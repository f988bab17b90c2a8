"""Reconstruction state shared by the pipeline, bundle and consistency modules."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from .config import PipelineConfig
from .depth import (NormalResidualModel, calibrate_depth_uncertainty, propagate_normal_uncertainty,
                    smoothed_log_gradients)
from .geometry import CameraIntrinsics, PoseSE3, ScenePoint
from .graph import CorrespondenceGraph


@dataclass
class Frame:
    image_id: str
    K: CameraIntrinsics
    keypoints: np.ndarray            # (N, 3): u, v, sigma_px
    prior_depth: np.ndarray          # (H, W) as loaded
    prior_sigma: np.ndarray          # (H, W) raw depth sigma as loaded
    normals: np.ndarray              # (H, W, 3)
    normal_sigma: np.ndarray         # (H, W) radians
    pose: Optional[PoseSE3] = None
    scale: Optional[float] = None
    depth_scaled: Optional[np.ndarray] = None
    depth_sigma: Optional[np.ndarray] = None
    depth_refined: Optional[np.ndarray] = None
    refined_var: Optional[np.ndarray] = None
    last_refine_cost: Optional[float] = None
    kp_point: Optional[np.ndarray] = None   # (N,) point id per keypoint, -1 if none
    num_inliers: int = 0
    _normal_model: Optional[NormalResidualModel] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kp_point is None:
            self.kp_point = -np.ones(len(self.keypoints), dtype=int)

    @property
    def registered(self) -> bool:
        return self.pose is not None

    def normal_model(self, floor: float) -> NormalResidualModel:
        if self._normal_model is None or self._normal_model.floor != floor:
            du, dv = smoothed_log_gradients(self.normals, self.K)
            self._normal_model = propagate_normal_uncertainty(self.normals, self.normal_sigma, self.K, du, dv,
                                                              floor=floor)
        return self._normal_model

    def apply_scale(self, s: float, cfg: PipelineConfig):
        """Scale the prior into scene units; sigma is calibrated in scene units."""
        self.scale = s
        self.depth_scaled = self.prior_depth * s
        self.depth_sigma = calibrate_depth_uncertainty(
            self.depth_scaled, self.prior_sigma * s,
            floor_abs=cfg.depth_sigma_floor, c_prop=cfg.depth_sigma_prop, c_scale=cfg.depth_sigma_scale)
        self.depth_refined = self.depth_scaled.copy()
        self.refined_var = None
        self.last_refine_cost = None

    def rescale(self, k: float):
        """Multiply every scene-unit depth quantity by k. Prior and
        integration costs are invariant under this change."""
        if k == 1.0:
            return
        self.scale *= k
        self.depth_scaled = self.depth_scaled * k
        self.depth_sigma = self.depth_sigma * k
        self.depth_refined = self.depth_refined * k
        if self.refined_var is not None:
            self.refined_var = self.refined_var * k**2

    def unregister(self):
        self.pose = None
        self.scale = None
        self.depth_scaled = self.depth_sigma = self.depth_refined = self.refined_var = None
        self.last_refine_cost = None
        self.kp_point[:] = -1
        self.num_inliers = 0


@dataclass
class Event:
    kind: str
    image: str = ""
    detail: str = ""

    def line(self) -> str:
        return f"{self.kind} {self.image} {self.detail}".rstrip()


@dataclass
class ReconstructionState:
    frames: Dict[str, Frame]
    graph: CorrespondenceGraph
    config: PipelineConfig
    points: Dict[int, ScenePoint] = field(default_factory=dict)
    track_point: Dict[int, int] = field(default_factory=dict)   # graph track id -> point id
    registered: List[str] = field(default_factory=list)
    gauge: Optional[str] = None
    events: List[Event] = field(default_factory=list)
    next_point_id: int = 0
    last_global: Tuple[int, int] = (0, 0)
    status: str = "OK"
    rejected: Set[str] = field(default_factory=set)    # consistency-rejected images, never retried

    def log(self, kind: str, image: str = "", detail: str = ""):
        self.events.append(Event(kind, image, detail))

    # -- points -----------------------------------------------------------

    def add_point(self, X: np.ndarray, track: List[Tuple[str, int]], provenance: str) -> int:
        pid = self.next_point_id
        self.next_point_id += 1
        self.points[pid] = ScenePoint(np.asarray(X, dtype=float), list(track), provenance)
        gt = None
        for img, kp in track:
            self.frames[img].kp_point[kp] = pid
            gt = int(self.graph.track_of[img][kp])
        if gt is not None:
            self.track_point[gt] = pid
        return pid

    def add_observation(self, pid: int, image: str, kp: int):
        self.points[pid].track.append((image, kp))
        self.frames[image].kp_point[kp] = pid

    def remove_observation(self, pid: int, image: str, kp: int):
        pt = self.points[pid]
        pt.track = [o for o in pt.track if o != (image, kp)]
        self.frames[image].kp_point[kp] = -1
        if not pt.track:
            self.remove_point(pid)

    def remove_point(self, pid: int):
        pt = self.points.pop(pid)
        for img, kp in pt.track:
            if self.frames[img].kp_point[kp] == pid:
                self.frames[img].kp_point[kp] = -1
        for gt in [t for t, p in self.track_point.items() if p == pid]:
            del self.track_point[gt]

    def point_for_keypoint(self, image: str, kp: int) -> int:
        gt = int(self.graph.track_of[image][kp])
        return self.track_point.get(gt, -1)

    def deregister(self, image: str):
        """Drop an image, its observations, and points left without any."""
        frame = self.frames[image]
        for kp in np.flatnonzero(frame.kp_point >= 0):
            pid = int(frame.kp_point[kp])
            if pid in self.points:
                self.remove_observation(pid, image, int(kp))
        frame.unregister()
        if image in self.registered:
            self.registered.remove(image)

    def snapshot(self) -> dict:
        return {
            "frames": {k: copy.copy(f) for k, f in self.frames.items()},
            "arrays": {k: (f.kp_point.copy(), f.depth_refined, f.depth_scaled, f.depth_sigma, f.refined_var)
                       for k, f in self.frames.items()},
            "points": {k: ScenePoint(p.position.copy(), list(p.track), p.provenance, p.covariance.copy())
                       for k, p in self.points.items()},
            "track_point": dict(self.track_point),
            "registered": list(self.registered),
            "next_point_id": self.next_point_id,
            "last_global": self.last_global,
        }

    def restore(self, snap: dict):
        self.frames = snap["frames"]
        for k, f in self.frames.items():
            kp, dr, ds, sg, rv = snap["arrays"][k]
            f.kp_point, f.depth_refined, f.depth_scaled, f.depth_sigma, f.refined_var = kp, dr, ds, sg, rv
        self.points = snap["points"]
        self.track_point = snap["track_point"]
        self.registered = snap["registered"]
        self.next_point_id = snap["next_point_id"]
        self.last_global = snap["last_global"]

    def observations(self, pid: int):
        """Observations of a point in registered images, as (image, kp, uv, sigma)."""
        out = []
        for img, kp in self.points[pid].track:
            f = self.frames[img]
            if f.registered:
                out.append((img, kp, f.keypoints[kp, :2], f.keypoints[kp, 2]))
        return out
