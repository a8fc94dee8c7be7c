"""Point-conditioned box regression and self-training on synthetic scenes."""

from .detector import Checkpoint, Detection, ModelConfig
from .geometry import Box, OffsetQuad, PointAnnotation
from .pipeline import ExperimentConfig, PseudoLabel, TrainPlan, run_experiment
from .synth_data import DataConfig, Scene

__version__ = "0.1.0"

__all__ = [
    "Box",
    "Checkpoint",
    "DataConfig",
    "Detection",
    "ExperimentConfig",
    "ModelConfig",
    "OffsetQuad",
    "PointAnnotation",
    "PseudoLabel",
    "Scene",
    "TrainPlan",
    "run_experiment",
]
