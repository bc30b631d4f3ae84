"""Task-agnostic distillation of a transformer encoder with simultaneous structured pruning.

The student starts as an exact copy of the teacher and is narrowed column by
column under a cubic schedule while being distilled, so the teacher/student
prediction gap stays small throughout.
"""

from .model import PRESETS, ModelConfig, clone_model, count_parameters, forward, init_model
from .trainer import DivergenceError, TrainConfig, distill, evaluate_mlm, pretrain_teacher

__all__ = [
    "PRESETS",
    "ModelConfig",
    "TrainConfig",
    "DivergenceError",
    "clone_model",
    "count_parameters",
    "distill",
    "evaluate_mlm",
    "forward",
    "init_model",
    "pretrain_teacher",
]
__version__ = "0.1.0"
