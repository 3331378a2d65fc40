"""Federated learning simulator with QKD-keyed encrypted weight transport."""

from .config import ExperimentConfig, parse_config
from .federation import run_training
from .model import LayerSpec, ModelParameters, default_arch, init_model

__all__ = [
    "ExperimentConfig",
    "LayerSpec",
    "ModelParameters",
    "default_arch",
    "init_model",
    "parse_config",
    "run_training",
]

__version__ = "0.1.0"
