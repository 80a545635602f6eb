"""Pixel-space flow-matching depth estimation at desk scale."""
from .depth_norm import DepthMap, NormConfig, NormStats, denormalize, normalize_depth
from .dit import CascadeDiT, ModelConfig
from .estimator import PixelDepthEstimator, VideoDepthEstimator
from .exceptions import (
    ConfigError,
    DataError,
    DegenerateRange,
    EmptyValidSet,
    NonFiniteActivation,
    NonFiniteLoss,
    NonFiniteVelocity,
    PxDepthError,
    ShapeMismatch,
    SingularAlignment,
)
from .flow_matching import SamplerConfig, euler_sample
from .geometry import CameraIntrinsics, EvalReport, evaluate_depth
from .losses import LossWeights
from .pipeline import Checkpoint, TrainConfig, infer, infer_video, load_checkpoint, save_checkpoint, train
from .video import RGTPConfig


__all__ = [
    "CameraIntrinsics", "CascadeDiT", "Checkpoint", "ConfigError", "DataError", "DegenerateRange",
    "DepthMap", "EmptyValidSet", "EvalReport", "LossWeights", "ModelConfig", "NonFiniteActivation",
    "NonFiniteLoss", "NonFiniteVelocity", "NormConfig", "NormStats", "PixelDepthEstimator",
    "PxDepthError", "RGTPConfig", "SamplerConfig", "ShapeMismatch", "SingularAlignment",
    "TrainConfig", "VideoDepthEstimator", "denormalize", "euler_sample", "evaluate_depth", "infer",
    "infer_video", "load_checkpoint", "normalize_depth", "save_checkpoint", "train",
]

__version__ = "0.1.0"
