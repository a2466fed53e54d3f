"""Minimal float64 tensor library with reverse-mode autodiff."""

from . import functional
from .functional import (
    add,
    as_tensor,
    broadcast_to,
    clamp_min,
    concat,
    cosine_matrix,
    cosine_similarity,
    div,
    elu,
    exp,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    norm,
    normalize_rows,
    reshape,
    scale,
    softmax,
    split,
    sqrt,
    square,
    stack,
    sub,
    swapaxes,
    take,
    transpose,
)
from .functional import sum as reduce_sum
from .gradcheck import GradcheckReport, gradcheck, numerical_gradient, relative_error
from .nn import MLP, Linear, Module
from .tensor import Parameter, Tape, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "GradcheckReport", "Linear", "MLP", "Module", "Parameter", "Tape", "Tensor",
    "add", "as_tensor", "backward", "broadcast_to", "clamp_min", "concat",
    "cosine_matrix", "cosine_similarity", "div", "elu", "exp", "functional",
    "gradcheck", "is_grad_enabled", "log", "log_softmax", "matmul", "mean", "mul",
    "neg", "no_grad", "norm", "normalize_rows", "numerical_gradient", "reduce_sum",
    "relative_error", "reshape", "scale", "softmax", "split", "sqrt", "square",
    "stack", "sub", "swapaxes", "take", "transpose",
]
