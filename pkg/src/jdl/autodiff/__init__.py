"""Minimal reverse-mode autodiff over dense float64 arrays."""

from .tensor import Tensor, tensor, backward, no_grad, grad_enabled, op_count
from .ops import (
    add, mul, matmul, conv2d, conv2d_transpose, avg_pool2d, upsample_nearest,
    silu, leaky_relu, sigmoid, group_norm, concat, reshape, sum, mean, mse,
    bce_with_logits, exp, forward_primitive, PRIMITIVE_KINDS,
)
from .gradcheck import grad_check
from .checkpoint import save_weights, load_weights, MAGIC

__all__ = [
    "Tensor", "tensor", "backward", "no_grad", "grad_enabled", "op_count",
    "add", "mul", "matmul", "conv2d", "conv2d_transpose", "avg_pool2d",
    "upsample_nearest", "silu", "leaky_relu", "sigmoid", "group_norm",
    "concat", "reshape", "sum", "mean", "mse", "bce_with_logits", "exp",
    "forward_primitive", "PRIMITIVE_KINDS", "grad_check",
    "save_weights", "load_weights", "MAGIC",
]
