"""Training objective, optimizer and loop."""
from __future__ import annotations

from .losses import (
    LossTerm,
    TotalLoss,
    classification_loss,
    classification_term,
    essential_regression_loss,
    load_balance_loss,
    load_balance_term,
    regression_term,
    total_loss,
)
from .optimizer import adam_state, adam_step
from .trainer import (
    MetricsLog,
    Trainer,
    TrainingRecord,
    TrainingResult,
    build_batch,
    metrics_header,
    read_metrics,
    train_loop,
)

__all__ = [
    "LossTerm",
    "MetricsLog",
    "TotalLoss",
    "Trainer",
    "TrainingRecord",
    "TrainingResult",
    "adam_state",
    "adam_step",
    "build_batch",
    "classification_loss",
    "classification_term",
    "essential_regression_loss",
    "load_balance_loss",
    "load_balance_term",
    "metrics_header",
    "read_metrics",
    "regression_term",
    "total_loss",
    "train_loop",
]
