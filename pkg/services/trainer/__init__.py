from services.trainer.loop import (
    TrainResult, TrainState, TrainingLoop, run_training, train_disentangle, train_natural, train_standard_at,
)
from services.trainer.schedule import EarlyStopping, early_stop_update, step_lr
from services.trainer.steps import DisentangleSteps, build_optimizers

__all__ = [
    "DisentangleSteps",
    "EarlyStopping",
    "TrainResult",
    "TrainState",
    "TrainingLoop",
    "build_optimizers",
    "early_stop_update",
    "run_training",
    "step_lr",
    "train_disentangle",
    "train_natural",
    "train_standard_at",
]
