"""GRPO and AMIR-GRPO (GRPO with implicit intra-group preference regularization) at toy scale."""

from .trainer import TrainConfig, TrainResult, evaluate, train

__all__ = ["TrainConfig", "TrainResult", "evaluate", "train"]
__version__ = "0.1.0"
