"""Training entry point decoupled from the estimator constructor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

from ..data import Dataset
from .base import NetClassifier, TrainHistory


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    learning_rate: float = 1e-3
    label_smoothing: float = 0.1
    seed: int = 0


def train(
    model: NetClassifier,
    dataset: Dataset,
    cfg: TrainConfig,
    validation: Optional[Dataset] = None,
) -> Tuple[NetClassifier, TrainHistory]:
    """Train ``model`` in place with Adam and return it with its accuracy history.

    The seed drives batch order only; initialization comes from the model's
    ``random_state`` when it is first initialized here.
    """
    if not hasattr(model, "params_"):
        model.initialize(dataset.images.shape[1:], dataset.n_classes)
    model.set_params(batch_size=cfg.batch_size, learning_rate=cfg.learning_rate, label_smoothing=cfg.label_smoothing)
    if cfg.epochs <= 0:
        return model, model.history_
    history = model.train_epochs(
        dataset.images,
        dataset.labels,
        cfg.epochs,
        X_val=None if validation is None else validation.images,
        y_val=None if validation is None else validation.labels,
        seed=cfg.seed,
    )
    return model, history
