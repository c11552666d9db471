"""Feed-forward structure-from-motion with anchor-based scene representations.

A compact transformer regresses camera poses, depth maps, and scene coordinate
maps from a set of anchor images, distills the anchors into a layered token
cache, and localizes arbitrarily many query images against that cache through
masked attention. Includes the synthetic-scene data source, multitask training
losses, trajectory metrics, and a CLI.
"""

__version__ = "0.1.0"

from .backbone import (
    FrameResult,
    NetworkConfig,
    SceneRegressor,
    SceneRepresentation,
    load_checkpoint,
    load_representation,
    save_checkpoint,
    save_representation,
)
from .config import TrainConfig
from .evalkit import MetricsReport, Trajectory, compute_metrics
from .geometry import CameraPose, DenseOutput, Quaternion, decode_pose, encode_pose
from .synthscene import SceneConfig, SyntheticScene, generate_scene, render_frame
from .training import train

__all__ = [
    "CameraPose",
    "DenseOutput",
    "FrameResult",
    "MetricsReport",
    "NetworkConfig",
    "Quaternion",
    "SceneConfig",
    "SceneRegressor",
    "SceneRepresentation",
    "SyntheticScene",
    "TrainConfig",
    "Trajectory",
    "compute_metrics",
    "decode_pose",
    "encode_pose",
    "generate_scene",
    "load_checkpoint",
    "load_representation",
    "render_frame",
    "save_checkpoint",
    "save_representation",
    "train",
]
