"""Shared estimator machinery for the numpy-backed classifiers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .. import diffcore as F
from ..diffcore import Adam, Tensor
from ..errors import DivergedTraining, ShapeMismatch
from ..validation import check_images, check_labels

logger = logging.getLogger(__name__)


@dataclass
class AttentionTrace:
    """Per-layer attention weights of shape (N, heads, tokens, tokens)."""

    layers: List[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)

    def image(self, i: int) -> "AttentionTrace":
        return AttentionTrace([a[i : i + 1] for a in self.layers])


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)


class NetClassifier(ClassifierMixin, BaseEstimator):
    """Base class: parameters live in ``params_`` as float64 arrays.

    Subclasses implement ``_init_params`` and ``_forward``. Forward passes run
    at the precision given by ``dtype``; gradient checks switch to float64 via
    :func:`spectrobust.diffcore.default_dtype`.
    """

    arch = "base"

    # subclasses list their architecture knobs here (used by checkpoints)
    _arch_params: Tuple[str, ...] = ()

    def _init_params(self, rng: np.random.Generator, input_shape, n_classes) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def _forward(self, p: Dict[str, Tensor], x: Tensor, trace: Optional[AttentionTrace] = None):
        """Return (logits, penultimate features)."""
        raise NotImplementedError

    # ------------------------------------------------------------ lifecycle

    def initialize(self, input_shape, n_classes: int) -> "NetClassifier":
        input_shape = tuple(int(v) for v in input_shape)
        self._validate_architecture(input_shape)
        rng = np.random.default_rng(self.random_state)
        self.params_ = {k: np.asarray(v, dtype=np.float64) for k, v in self._init_params(rng, input_shape, n_classes).items()}
        self.input_shape_ = input_shape
        self.n_classes_ = int(n_classes)
        self.classes_ = np.arange(self.n_classes_)
        self.history_ = TrainHistory()
        return self

    def _validate_architecture(self, input_shape) -> None:
        pass

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X, allow_single=False)
        n_classes = self.n_classes if getattr(self, "n_classes", None) else int(np.max(y)) + 1
        y = check_labels(y, len(X), n_classes)
        self.initialize(X.shape[1:], n_classes)
        self.train_epochs(X, y, self.epochs, X_val=X_val, y_val=y_val)
        return self

    def train_epochs(self, X, y, epochs: int, X_val=None, y_val=None, seed: Optional[int] = None) -> TrainHistory:
        """Continue training the current parameters for ``epochs`` passes."""
        check_is_fitted(self, "params_")
        X = check_images(X, shape=self.input_shape_, allow_single=False)
        y = check_labels(y, len(X), self.n_classes_)
        rng = np.random.default_rng(self.random_state if seed is None else seed)
        names = sorted(self.params_)
        opt = Adam([self.params_[k] for k in names], lr=self.learning_rate)
        with F.default_dtype(self.dtype):
            for epoch in range(epochs):
                order = rng.permutation(len(X))
                total, correct = 0.0, 0
                for start in range(0, len(X), self.batch_size):
                    idx = order[start : start + self.batch_size]
                    p = {k: Tensor(self.params_[k], requires_grad=True) for k in names}
                    logits, _ = self._forward(p, Tensor(X[idx]))
                    loss = F.cross_entropy(logits, y[idx], label_smoothing=self.label_smoothing)
                    if not np.isfinite(loss.data):
                        raise DivergedTraining(f"non-finite loss at epoch {epoch}")
                    loss.backward()
                    opt.step([p[k].grad for k in names])
                    total += float(loss.data) * len(idx)
                    correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
                self.history_.train_loss.append(total / len(X))
                self.history_.train_accuracy.append(correct / len(X))
                if X_val is not None:
                    self.history_.val_accuracy.append(float(self.score(X_val, y_val)))
                logger.info(
                    "%s epoch %d loss %.4f train acc %.3f%s",
                    self.arch,
                    epoch + 1,
                    self.history_.train_loss[-1],
                    self.history_.train_accuracy[-1],
                    f" val acc {self.history_.val_accuracy[-1]:.3f}" if X_val is not None else "",
                )
        return self.history_

    # ----------------------------------------------------------- inference

    def param_tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        check_is_fitted(self, "params_")
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params_.items()}

    def forward_tensor(self, x: Tensor, trace: Optional[AttentionTrace] = None) -> Tensor:
        """Differentiable logits for an (N, C, H, W) tensor (weights held constant)."""
        self._check_input(x.shape)
        logits, _ = self._forward(self.param_tensors(), x, trace)
        return logits

    def features_tensor(self, x: Tensor) -> Tensor:
        self._check_input(x.shape)
        _, feats = self._forward(self.param_tensors(), x)
        return feats

    def forward_both(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        self._check_input(x.shape)
        return self._forward(self.param_tensors(), x)

    def _check_input(self, shape) -> None:
        check_is_fitted(self, "params_")
        if len(shape) != 4 or tuple(shape[1:]) != self.input_shape_:
            raise ShapeMismatch(f"model expects (N, {self.input_shape_}), got {tuple(shape)}")

    def _batched(self, X, fn, batch_size: int = 256) -> np.ndarray:
        X = check_images(X)
        self._check_input(X.shape)
        outs = []
        with F.no_grad(), F.default_dtype(self.dtype):
            p = self.param_tensors()
            for start in range(0, len(X), batch_size):
                outs.append(np.asarray(fn(p, Tensor(X[start : start + batch_size])), dtype=np.float64))
        if not outs:
            return np.zeros((0,))
        return np.concatenate(outs, axis=0)

    def decision_function(self, X) -> np.ndarray:
        return self._batched(X, lambda p, x: self._forward(p, x)[0].data)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)

    def penultimate(self, X) -> np.ndarray:
        return self._batched(X, lambda p, x: self._forward(p, x)[1].data)

    def attention_trace(self, X) -> AttentionTrace:
        raise NotImplementedError(f"{type(self).__name__} has no attention layers")

    @property
    def n_parameters(self) -> int:
        check_is_fitted(self, "params_")
        return int(sum(v.size for v in self.params_.values()))


def predict(model: NetClassifier, X) -> Tuple[np.ndarray, np.ndarray]:
    """Class indices and softmax probabilities."""
    probs = model.predict_proba(X)
    return probs.argmax(axis=1), probs


def penultimate(model: NetClassifier, X) -> np.ndarray:
    return model.penultimate(X)
