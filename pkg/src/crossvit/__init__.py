"""Dual-branch multi-scale vision transformer with cross-attention token fusion."""
from .config import BranchConfig, ConfigError, FusionScheme, ModelConfig, TrainConfig, preset, train_preset
from .model import Parameters, adapt_resolution, build, forward, predict_heads
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "BranchConfig",
    "ConfigError",
    "FusionScheme",
    "ModelConfig",
    "Parameters",
    "Tensor",
    "TrainConfig",
    "adapt_resolution",
    "build",
    "forward",
    "predict_heads",
    "preset",
    "train_preset",
]
