"""Sparse selective state-space model for joint land-cover classification and
change detection on multi-band image time series, with a class-transition
prior coupling the heads."""
from .config import RunConfig
from .errors import TrainingFault, ValidationError
from .losses import LossWeights, TransitionMatrix, build_transition
from .model import KAMamba, ModelConfig

__all__ = [
    "KAMamba",
    "LossWeights",
    "ModelConfig",
    "RunConfig",
    "TrainingFault",
    "TransitionMatrix",
    "ValidationError",
    "build_transition",
]
__version__ = "0.1.0"
