"""Two-scale (global + zoomed local) chromosome type and polarity classifier
with a from-scratch numpy autodiff core."""
from .dispatch import CaseProbabilities, KaryotypeAssignment, dispatch_case
from .model import VarifocalModel
from .trainer import TrainConfig, predict, predict_batch, run_schedule
from .zoom import RelativeBox, VarifocalConstants

__all__ = [
    "CaseProbabilities",
    "KaryotypeAssignment",
    "RelativeBox",
    "TrainConfig",
    "VarifocalConstants",
    "VarifocalModel",
    "dispatch_case",
    "predict",
    "predict_batch",
    "run_schedule",
]
