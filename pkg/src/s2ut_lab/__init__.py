"""Desk-scale speech-to-unit translation lab with multi-token prediction losses."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .losses import LossBreakdown, LossWeights, UnitSequence
from .model import Model, ModelConfig
from .task import TaskSpec, generate_dataset
from .training import TrainConfig, train

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad",
    "LossBreakdown", "LossWeights", "UnitSequence",
    "Model", "ModelConfig", "TaskSpec", "generate_dataset",
    "TrainConfig", "train",
]

__version__ = "0.1.0"
