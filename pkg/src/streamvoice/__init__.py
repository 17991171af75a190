"""Streaming language-model voice conversion at desk scale."""

from .config import LmConfig, PredictorConfig, RunConfig, StreamConfig, TaskConfig, TrainConfig
from .model import StreamVoice
from .numerics import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "LmConfig",
    "PredictorConfig",
    "RunConfig",
    "StreamConfig",
    "StreamVoice",
    "TaskConfig",
    "TrainConfig",
]
