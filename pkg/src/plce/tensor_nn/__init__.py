"""Minimal dense-tensor kernels with reverse-mode gradients."""

from .layers import (
    NORM_MODES,
    conv2d,
    conv_out_size,
    convgru_step,
    deconv2d,
    deconv_out_size,
    glu,
    instance_norm,
    linear,
    lstm,
    prelu,
)
from .ops import (
    add,
    as_tensor,
    concat,
    mean_all,
    mul,
    permute,
    reshape,
    scale,
    sigmoid,
    square,
    sub,
    sum_all,
    tanh,
    weighted_sum,
    zeros,
)
from .tensor import Tape, Tensor, active_tape, backward, get_dtype, precision

__all__ = [
    "NORM_MODES", "Tape", "Tensor", "active_tape", "add", "as_tensor", "backward", "concat",
    "conv2d", "conv_out_size", "convgru_step", "deconv2d", "deconv_out_size", "get_dtype", "glu",
    "instance_norm", "linear", "lstm", "mean_all", "mul", "permute", "precision", "prelu",
    "reshape", "scale", "sigmoid", "square", "sub", "sum_all", "tanh", "weighted_sum", "zeros",
]
