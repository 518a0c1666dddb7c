"""Small residual CNN."""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import numpy as np

from .. import diffcore as F
from ..diffcore import Tensor
from ..errors import ShapeMismatch
from .base import AttentionTrace, NetClassifier

_ACTIVATIONS = {"relu": F.relu, "gelu": F.gelu}


def _he(rng, shape, fan_in, gain=1.0):
    return rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), shape)


class ResidualCNNClassifier(NetClassifier):
    """Strided-conv stem, then one (downsample conv, residual block) pair per stage.

    With the default ``widths=(16, 32, 48)`` a 3x32x32 input is reduced to
    16x16, 8x8 and 4x4 maps; global average pooling over the last stage is the
    penultimate feature vector.
    """

    arch = "cnn"
    _arch_params = ("widths", "activation")

    def __init__(
        self,
        widths: Sequence[int] = (16, 32, 48),
        activation: str = "relu",
        n_classes: Optional[int] = None,
        epochs: int = 12,
        batch_size: int = 64,
        learning_rate: float = 1e-3,
        label_smoothing: float = 0.1,
        random_state: int = 0,
        dtype: str = "float32",
    ):
        self.widths = widths
        self.activation = activation
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.label_smoothing = label_smoothing
        self.random_state = random_state
        self.dtype = dtype

    def _validate_architecture(self, input_shape) -> None:
        _, h, w = input_shape
        if h < 16 or w < 16:
            raise ShapeMismatch(f"CNN needs H, W >= 16, got {(h, w)}")
        if len(self.widths) < 3:
            raise ValueError("widths needs a stem width and at least two stage widths")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def _init_params(self, rng, input_shape, n_classes) -> Dict[str, np.ndarray]:
        c = input_shape[0]
        widths = list(self.widths)
        p = {
            "stem.w": _he(rng, (widths[0], c, 3, 3), c * 9),
            "stem.b": np.zeros(widths[0]),
        }
        prev = widths[0]
        for s, width in enumerate(widths[1:]):
            p[f"s{s}.down.w"] = _he(rng, (width, prev, 3, 3), prev * 9)
            p[f"s{s}.down.b"] = np.zeros(width)
            p[f"s{s}.conv1.w"] = _he(rng, (width, width, 3, 3), width * 9)
            p[f"s{s}.conv1.b"] = np.zeros(width)
            # damped second conv keeps the residual stream near identity at init
            p[f"s{s}.conv2.w"] = _he(rng, (width, width, 3, 3), width * 9, gain=0.3)
            p[f"s{s}.conv2.b"] = np.zeros(width)
            prev = width
        p["head.w"] = rng.normal(0.0, 1.0 / np.sqrt(prev), (n_classes, prev))
        p["head.b"] = np.zeros(n_classes)
        return p

    def _forward(self, p: Dict[str, Tensor], x: Tensor, trace: Optional[AttentionTrace] = None):
        act = _ACTIVATIONS[self.activation]
        h = act(F.conv2d(x, p["stem.w"], p["stem.b"], stride=2, padding=1))
        for s in range(len(self.widths) - 1):
            h = act(F.conv2d(h, p[f"s{s}.down.w"], p[f"s{s}.down.b"], stride=2, padding=1))
            r = act(F.conv2d(h, p[f"s{s}.conv1.w"], p[f"s{s}.conv1.b"], padding=1))
            r = F.conv2d(r, p[f"s{s}.conv2.w"], p[f"s{s}.conv2.b"], padding=1)
            h = act(h + r)
        feats = F.mean(h, axis=(2, 3))
        return F.linear(feats, p["head.w"], p["head.b"]), feats


def build_cnn(input_shape=(3, 32, 32), n_classes: int = 4, **knobs) -> ResidualCNNClassifier:
    """Construct and initialize an untrained residual CNN."""
    return ResidualCNNClassifier(n_classes=n_classes, **knobs).initialize(input_shape, n_classes)
