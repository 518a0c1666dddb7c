"""Dense real tensors with reverse-mode automatic differentiation."""

from . import functional
from .functional import (
    abs,
    add,
    atan2,
    avg_pool2d,
    clip,
    concat,
    conv2d,
    cos,
    cross_entropy,
    div,
    exp,
    gelu,
    getitem,
    l2_norm,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    sin,
    softmax,
    sqrt,
    sub,
    sum,
    swapaxes,
    take,
    transpose,
)
from .gradcheck import analytic_gradient, finite_difference_check, numerical_gradient
from .optim import Adam
from .tensor import (
    Tensor,
    as_tensor,
    backpropagate,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "Adam",
    "Tensor",
    "abs",
    "add",
    "analytic_gradient",
    "as_tensor",
    "atan2",
    "avg_pool2d",
    "backpropagate",
    "clip",
    "concat",
    "conv2d",
    "cos",
    "cross_entropy",
    "default_dtype",
    "div",
    "exp",
    "finite_difference_check",
    "functional",
    "gelu",
    "get_default_dtype",
    "getitem",
    "is_grad_enabled",
    "l2_norm",
    "layer_norm",
    "linear",
    "log",
    "log_softmax",
    "matmul",
    "max_pool2d",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "numerical_gradient",
    "power",
    "relu",
    "reshape",
    "set_default_dtype",
    "sin",
    "softmax",
    "sqrt",
    "sub",
    "sum",
    "swapaxes",
    "take",
    "transpose",
]
