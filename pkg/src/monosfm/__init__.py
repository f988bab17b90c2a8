"""Incremental structure-from-motion with monocular depth and normal priors."""
from .config import PipelineConfig, load_config
from .evaluate import evaluate_poses, pairwise_errors
from .geometry import CameraIntrinsics, PoseSE3
from .io import Scene, load_scene, save_reconstruction
from .pipeline import reconstruct
from .synth import generate, get_preset

__all__ = ["CameraIntrinsics", "PipelineConfig", "PoseSE3", "Scene", "evaluate_poses", "generate",
           "get_preset", "load_config", "load_scene", "pairwise_errors", "reconstruct", "save_reconstruction"]
__version__ = "0.1.0"
