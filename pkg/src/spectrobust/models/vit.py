"""Small Vision Transformer (pre-norm, class token, learned positions)."""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from .. import diffcore as F
from ..diffcore import Tensor
from ..errors import IndivisiblePatch
from ..validation import check_images
from .base import AttentionTrace, NetClassifier


def _xavier(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_out, fan_in))


def patchify(x: Tensor, patch: int) -> Tensor:
    """(N, C, H, W) -> (N, tokens, C*patch*patch), tokens in row-major grid order."""
    n, c, h, w = x.shape
    gh, gw = h // patch, w // patch
    t = F.reshape(x, (n, c, gh, patch, gw, patch))
    t = F.transpose(t, (0, 2, 4, 1, 3, 5))
    return F.reshape(t, (n, gh * gw, c * patch * patch))


class VisionTransformerClassifier(NetClassifier):
    """ViT with a class token; the penultimate feature is the normed class token."""

    arch = "vit"
    _arch_params = ("patch_size", "embed_dim", "depth", "n_heads", "mlp_ratio")

    def __init__(
        self,
        patch_size: int = 8,
        embed_dim: int = 64,
        depth: int = 3,
        n_heads: int = 4,
        mlp_ratio: int = 2,
        n_classes: Optional[int] = None,
        epochs: int = 20,
        batch_size: int = 64,
        learning_rate: float = 1e-3,
        label_smoothing: float = 0.1,
        random_state: int = 0,
        dtype: str = "float32",
    ):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.n_heads = n_heads
        self.mlp_ratio = mlp_ratio
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.label_smoothing = label_smoothing
        self.random_state = random_state
        self.dtype = dtype

    def _validate_architecture(self, input_shape) -> None:
        _, h, w = input_shape
        if h % self.patch_size or w % self.patch_size:
            raise IndivisiblePatch(f"patch size {self.patch_size} does not divide {(h, w)}")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")

    def n_tokens(self, input_shape=None) -> int:
        _, h, w = input_shape or self.input_shape_
        return (h // self.patch_size) * (w // self.patch_size) + 1

    def _init_params(self, rng, input_shape, n_classes) -> Dict[str, np.ndarray]:
        c = input_shape[0]
        d = self.embed_dim
        hidden = d * self.mlp_ratio
        patch_dim = c * self.patch_size**2
        p = {
            "embed.w": _xavier(rng, d, patch_dim),
            "embed.b": np.zeros(d),
            "cls": rng.normal(0.0, 0.02, (1, 1, d)),
            "pos": rng.normal(0.0, 0.02, (1, self.n_tokens(input_shape), d)),
        }
        for i in range(self.depth):
            p[f"b{i}.ln1.g"] = np.ones(d)
            p[f"b{i}.ln1.b"] = np.zeros(d)
            p[f"b{i}.qkv.w"] = _xavier(rng, 3 * d, d)
            p[f"b{i}.qkv.b"] = np.zeros(3 * d)
            p[f"b{i}.proj.w"] = _xavier(rng, d, d)
            p[f"b{i}.proj.b"] = np.zeros(d)
            p[f"b{i}.ln2.g"] = np.ones(d)
            p[f"b{i}.ln2.b"] = np.zeros(d)
            p[f"b{i}.fc1.w"] = _xavier(rng, hidden, d)
            p[f"b{i}.fc1.b"] = np.zeros(hidden)
            p[f"b{i}.fc2.w"] = _xavier(rng, d, hidden)
            p[f"b{i}.fc2.b"] = np.zeros(d)
        p["norm.g"] = np.ones(d)
        p["norm.b"] = np.zeros(d)
        p["head.w"] = _xavier(rng, n_classes, d)
        p["head.b"] = np.zeros(n_classes)
        return p

    def _attention(self, p, i: int, x: Tensor, trace: Optional[AttentionTrace]) -> Tensor:
        n, t, d = x.shape
        heads = self.n_heads
        dh = d // heads
        qkv = F.linear(x, p[f"b{i}.qkv.w"], p[f"b{i}.qkv.b"])
        qkv = F.transpose(F.reshape(qkv, (n, t, 3, heads, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = F.matmul(q, F.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        attn = F.softmax(scores, axis=-1)
        if trace is not None:
            trace.layers.append(np.array(attn.data, dtype=np.float64))
        out = F.matmul(attn, v)
        out = F.reshape(F.transpose(out, (0, 2, 1, 3)), (n, t, d))
        return F.linear(out, p[f"b{i}.proj.w"], p[f"b{i}.proj.b"])

    def _forward(self, p: Dict[str, Tensor], x: Tensor, trace: Optional[AttentionTrace] = None):
        n = x.shape[0]
        tokens = F.linear(patchify(x, self.patch_size), p["embed.w"], p["embed.b"])
        cls = p["cls"] + np.zeros((n, 1, self.embed_dim), dtype=tokens.data.dtype)
        h = F.concat([cls, tokens], axis=1) + p["pos"]
        for i in range(self.depth):
            h = h + self._attention(p, i, F.layer_norm(h, p[f"b{i}.ln1.g"], p[f"b{i}.ln1.b"]), trace)
            m = F.layer_norm(h, p[f"b{i}.ln2.g"], p[f"b{i}.ln2.b"])
            m = F.linear(F.gelu(F.linear(m, p[f"b{i}.fc1.w"], p[f"b{i}.fc1.b"])), p[f"b{i}.fc2.w"], p[f"b{i}.fc2.b"])
            h = h + m
        feats = F.layer_norm(h[:, 0], p["norm.g"], p["norm.b"])
        return F.linear(feats, p["head.w"], p["head.b"]), feats

    def attention_trace(self, X) -> AttentionTrace:
        """Attention weights of every block for a batch of images."""
        X = check_images(X)
        self._check_input(X.shape)
        trace = AttentionTrace()
        with F.no_grad(), F.default_dtype(self.dtype):
            self._forward(self.param_tensors(), Tensor(X), trace)
        return trace


def build_vit(input_shape=(3, 32, 32), n_classes: int = 4, **knobs) -> VisionTransformerClassifier:
    """Construct and initialize an untrained ViT; raises IndivisiblePatch on bad patch sizes."""
    return VisionTransformerClassifier(n_classes=n_classes, **knobs).initialize(input_shape, n_classes)
