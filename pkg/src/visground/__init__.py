"""Visual grounding with visual-linguistic verification and multi-stage decoding."""

from .boxes import Box, LossWeights, accuracy_at_0_5, giou, iou, stage_loss, total_loss
from .model import GroundingModel, ModelConfig, StagePredictions
from .tensor import Tape, Tensor, backward, finite_difference_check

__version__ = "0.1.0"

__all__ = [
    "Box",
    "GroundingModel",
    "LossWeights",
    "ModelConfig",
    "StagePredictions",
    "Tape",
    "Tensor",
    "accuracy_at_0_5",
    "backward",
    "finite_difference_check",
    "giou",
    "iou",
    "stage_loss",
    "total_loss",
]
