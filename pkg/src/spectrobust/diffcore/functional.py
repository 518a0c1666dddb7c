"""Differentiable operations on :class:`Tensor`.

Every op computes its forward value with numpy and registers a closure that
maps the output gradient to gradients for each parent.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import InvalidAxis, ShapeMismatch
from .tensor import Tensor, as_tensor, get_default_dtype

Operand = Union[Tensor, float, int, np.ndarray]

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


def _check_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise InvalidAxis(f"axis {ax} out of range for {ndim}-d tensor")
    return tuple(ax % ndim for ax in axes) if isinstance(axis, tuple) else axis % ndim


# ---------------------------------------------------------------- elementwise


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(ad * bd, (a, b), backward)


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(out, (a, b), backward)


def neg(a: Operand) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def power(a: Operand, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if exponent == 2:
        return Tensor._from_op(ad * ad, (a,), lambda g: (2.0 * g * ad,))
    return Tensor._from_op(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Operand) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a: Operand) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Operand) -> Tensor:
    """Square root; the derivative at 0 is taken as 0 (subgradient of a norm at the origin)."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return Tensor._from_op(out, (a,), backward)


def sin(a: Operand) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._from_op(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a: Operand) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._from_op(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def atan2(y: Operand, x: Operand) -> Tensor:
    """Quadrant-aware arctangent of y/x. Both partials are 0 at the origin."""
    y, x = as_tensor(y), as_tensor(x)
    _broadcast_shape(y, x)
    yd, xd = y.data, x.data

    def backward(g):
        r2 = xd * xd + yd * yd
        zero = r2 == 0
        inv = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, r2))
        return (
            _unbroadcast(g * xd * inv, yd.shape) if y.requires_grad else None,
            _unbroadcast(-g * yd * inv, xd.shape) if x.requires_grad else None,
        )

    return Tensor._from_op(np.arctan2(yd, xd), (y, x), backward)


def abs(a: Operand) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    ad = a.data
    return Tensor._from_op(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def clip(a: Operand, low: Optional[float], high: Optional[float]) -> Tensor:
    """Clamp to [low, high]; gradient passes inside the interval and is zero outside."""
    a = as_tensor(a)
    ad = a.data
    out = np.clip(ad, low, high)

    def backward(g):
        inside = np.ones(ad.shape, dtype=bool)
        if low is not None:
            inside &= ad >= low
        if high is not None:
            inside &= ad <= high
        return (g * inside,)

    return Tensor._from_op(out, (a,), backward)


def relu(a: Operand) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: Operand) -> Tensor:
    """Exact (erf based) Gaussian error linear unit."""
    a = as_tensor(a)
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad / _SQRT_2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * ad * ad)
        return (g * (cdf + ad * pdf),)

    return Tensor._from_op(ad * cdf, (a,), backward)


# ----------------------------------------------------------------- reductions


def sum(a: Operand, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Operand, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------- shape ops


def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {original} into {tuple(shape)}") from exc
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(original),))


def transpose(a: Operand, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(ax % a.ndim if -a.ndim <= ax < a.ndim else -1 for ax in axes) != list(range(a.ndim)):
        raise InvalidAxis(f"invalid permutation {axes} for {a.ndim}-d tensor")
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a: Operand, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    _check_axis((ax1, ax2), a.ndim)
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = _check_axis(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._from_op(out, tensors, backward)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def getitem(a: Operand, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    try:
        out = a.data[index]
    except IndexError as exc:
        raise InvalidAxis(str(exc)) from exc

    advanced = _is_advanced(index)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor._from_op(np.array(out), (a,), backward)


def take(a: Operand, indices: np.ndarray, axis: int = -1) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    indices = np.asarray(indices, dtype=np.intp)
    n = a.shape[axis]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise InvalidAxis(f"gather index out of range for axis of length {n}")

    def backward(g):
        moved = np.moveaxis(g, axis, -1)
        flat = moved.reshape(-1, moved.shape[-1])
        rows = flat.shape[0]
        # bincount over (row, index) pairs is much faster than np.add.at here
        keys = (np.arange(rows)[:, None] * n + (indices % n)[None, :]).ravel()
        acc = np.bincount(keys, weights=flat.ravel(), minlength=rows * n).astype(g.dtype, copy=False)
        acc = acc.reshape(moved.shape[:-1] + (n,))
        return (np.moveaxis(acc, -1, axis),)

    return Tensor._from_op(np.take(a.data, indices, axis=axis), (a,), backward)


# ------------------------------------------------------------- linear algebra


def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeMismatch(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return Tensor._from_op(np.matmul(ad, bd), (a, b), backward)


def linear(x: Operand, weight: Operand, bias: Optional[Operand] = None) -> Tensor:
    """x @ weight.T + bias with weight of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"linear expects last dim {weight.shape[1]}, got {x.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd.T).reshape(lead + (wd.shape[0],))
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._from_op(out, parents, backward)


# ------------------------------------------------------------- convolutions


def _pair(v) -> Tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Operand, weight: Operand, bias: Optional[Operand] = None, stride=1, padding=0) -> Tensor:
    """2D cross-correlation of (N, C, H, W) input with (O, C, kh, kw) kernels.

    Patches are gathered channels-last internally; the returned array is an
    NCHW view over channels-last memory so chained convolutions avoid copies.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-d input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeMismatch("conv2d kernel larger than padded input")
    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=x.data.dtype)
    xp[:, ph : ph + h, pw : pw + w, :] = x.data.transpose(0, 2, 3, 1)
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    ho, wo = windows.shape[1], windows.shape[2]
    # (N, Ho, Wo, C, kh, kw) -> rows ordered (kh, kw, C)
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = cols @ wmat.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gx = gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, ph : ph + h, pw : pw + w, :].transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._from_op(out, parents, backward)


def _pool_view(x: Tensor, kernel: int):
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeMismatch(f"pooling kernel {kernel} does not divide spatial size {(h, w)}")
    return x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel)


def avg_pool2d(x: Operand, kernel: int) -> Tensor:
    """Non-overlapping average pooling (stride equals kernel)."""
    x = as_tensor(x)
    view = _pool_view(x, kernel)
    scale = 1.0 / (kernel * kernel)

    def backward(g):
        expanded = np.broadcast_to(g[:, :, :, None, :, None] * scale, view.shape)
        return (expanded.reshape(x.shape),)

    return Tensor._from_op(view.mean(axis=(3, 5)), (x,), backward)


def max_pool2d(x: Operand, kernel: int) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    x = as_tensor(x)
    view = _pool_view(x, kernel)
    n, c, hh, _, ww, _ = view.shape
    blocks = view.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh, ww, kernel * kernel)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, hh, ww, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward)


# --------------------------------------------------------- normalizations


def softmax(a: Operand, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), backward)


def log_softmax(a: Operand, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), backward)


def layer_norm(x: Operand, gamma: Operand, beta: Operand, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeMismatch(f"layer_norm affine params must have shape ({x.shape[-1]},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gd
        gx = None
        if x.requires_grad:
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return Tensor._from_op(xhat * gd + beta.data, (x, gamma, beta), backward)


# ------------------------------------------------------------------ losses


def cross_entropy(logits: Operand, labels, reduction: str = "mean", label_smoothing: float = 0.0) -> Tensor:
    """Softmax cross-entropy of (N, K) logits against integer labels.

    With ``label_smoothing`` = s the target is (1 - s) * onehot + s / K.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy expects (N, K) logits and (N,) labels, got {logits.shape}, {labels.shape}")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(len(labels))
    per = -logp[rows, labels]
    if label_smoothing:
        per = (1.0 - label_smoothing) * per - label_smoothing * logp.mean(axis=1)
    if reduction == "none":
        out, scale = per, None
    elif reduction == "sum":
        out, scale = np.asarray(per.sum()), 1.0
    elif reduction == "mean":
        out, scale = np.asarray(per.mean()), 1.0 / len(labels)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0 - label_smoothing
        if label_smoothing:
            grad -= label_smoothing / logp.shape[1]
        if scale is None:
            return (grad * g[:, None],)
        return (grad * (g * scale),)

    return Tensor._from_op(out, (logits,), backward)


def l2_norm(a: Operand, axis=None) -> Tensor:
    """Euclidean norm (not squared) over ``axis``."""
    a = as_tensor(a)
    return sqrt(sum(a * a, axis=axis))


def constant(value, dtype=None) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype or get_default_dtype()))
