"""Text-guided traffic forecasting and report generation on road graphs."""

from .model import JointModel, ModelConfig
from .training import TrainConfig, evaluate, prepare_data, train

__version__ = "0.1.0"

__all__ = [
    "JointModel",
    "ModelConfig",
    "TrainConfig",
    "evaluate",
    "prepare_data",
    "train",
]
