"""Differentiable-array substrate: tensors, reverse-mode tape, Adam, FLOP counting."""

from . import kernels, ops
from .gradcheck import gradcheck, numerical_grad, relative_error
from .ops import (
    attention,
    concat,
    cross_entropy,
    embedding,
    gelu,
    l2_normalize,
    layer_norm,
    linear,
    matmul,
    relu,
    softmax,
)
from .optim import Adam, OptimizerState, adam_step, clip_grad_norm
from .rng import make_rng
from .tensor import (
    FlopCounter,
    Tape,
    Tensor,
    backward,
    count_flops,
    default_dtype,
    get_default_dtype,
    get_tape,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "Adam", "FlopCounter", "OptimizerState", "Tape", "Tensor", "adam_step", "attention",
    "backward", "clip_grad_norm", "concat", "count_flops", "cross_entropy", "default_dtype",
    "embedding", "gelu", "get_default_dtype", "get_tape", "gradcheck", "is_grad_enabled",
    "kernels", "l2_normalize", "layer_norm", "linear", "make_rng", "matmul", "no_grad",
    "numerical_grad", "ops", "relative_error", "relu", "set_default_dtype", "softmax",
]
