"""Streaming bird-call classification with a learnable log/linear filterbank."""

from __future__ import annotations

from .config import PRESETS, ConfigError, FilterbankParams, ModelConfig, TrainConfig
from .kernels import BACKEND
from .params import ModelParams, init_params
from .runtime import Engine, finalize, init_stream, process_chunk

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "PRESETS", "ConfigError", "Engine", "FilterbankParams", "ModelConfig",
    "ModelParams", "TrainConfig", "finalize", "init_params", "init_stream", "process_chunk",
    "__version__",
]
