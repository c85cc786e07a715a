"""GANomaly anomaly detection: data pipeline, networks, training, scoring and evaluation."""

from .model import ArchConfig, ModelBundle, build_models
from .trainer import TrainConfig, train

__all__ = ["ArchConfig", "ModelBundle", "TrainConfig", "build_models", "train"]
__version__ = "0.1.0"
