"""Desk-scale differentiable classifiers."""

from .base import AttentionTrace, NetClassifier, TrainHistory, penultimate, predict
from .checkpoint import load_checkpoint, save_checkpoint
from .cnn import ResidualCNNClassifier, build_cnn
from .training import TrainConfig, train
from .vit import VisionTransformerClassifier, build_vit

__all__ = [
    "AttentionTrace",
    "NetClassifier",
    "ResidualCNNClassifier",
    "TrainConfig",
    "TrainHistory",
    "VisionTransformerClassifier",
    "build_cnn",
    "build_vit",
    "load_checkpoint",
    "penultimate",
    "predict",
    "save_checkpoint",
    "train",
]
