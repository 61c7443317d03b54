"""
Learning-rate schedule and early stopping.
"""

import copy
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from config.schema import TrainConfig


def step_lr(epoch: int, config: TrainConfig) -> float:
    """
    Piecewise-constant decay: gamma * factor ** (number of decay epochs <= epoch).

    Epochs are counted from 1, so with decays at (100, 105, 110) epoch 106 has
    seen two decays.
    """
    passed = sum(1 for d in config.lr_decay_epochs if d <= epoch)
    return config.learning_rate * config.lr_decay_factor ** passed


@dataclass
class EarlyStopping:
    """
    Tracks the best validation metric (higher is better) and a snapshot of the
    model state at that epoch. Only strict improvements move the best point.
    """
    patience: int
    best_metric: float = -math.inf
    best_epoch: Optional[int] = None
    best_snapshot: Optional[Dict[str, Any]] = field(default=None, repr=False)
    bad_epochs: int = 0
    stopped: bool = False

    def state_dict(self) -> Dict[str, Any]:
        return {
            "patience": self.patience,
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
            "best_snapshot": self.best_snapshot,
            "bad_epochs": self.bad_epochs,
            "stopped": self.stopped,
        }

    @classmethod
    def from_state_dict(cls, state: Dict[str, Any]) -> "EarlyStopping":
        return cls(**state)


@dataclass
class StopDecision:
    action: str  # "continue" | "stop"
    best_snapshot: Optional[Dict[str, Any]]
    best_epoch: Optional[int]

    @property
    def should_stop(self) -> bool:
        return self.action == "stop"


def early_stop_update(state: EarlyStopping, metric_value: float, epoch: int,
                      snapshot: Optional[Dict[str, Any]] = None) -> StopDecision:
    """
    Record one epoch's metric.

    ``snapshot`` is deep-copied only when it becomes the new best. Training
    should stop once ``patience`` consecutive epochs fail to improve.
    """
    if metric_value > state.best_metric:
        state.best_metric = float(metric_value)
        state.best_epoch = epoch
        state.best_snapshot = copy.deepcopy(snapshot)
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.stopped = True
    return StopDecision(
        action="stop" if state.stopped else "continue",
        best_snapshot=state.best_snapshot,
        best_epoch=state.best_epoch,
    )
