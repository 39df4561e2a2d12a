"""Dense tensors, tape autodiff and a masked Adam optimizer."""

from .ops import (
    add,
    avg_pool2,
    bilinear_resize,
    channel_norm,
    conv2d,
    dropout,
    interp_matrix,
    leaky_relu,
    mean_all,
    mul,
    mul_scalar,
    pixel_entropy,
    pixel_nll,
    relu,
    softmax_over_channels,
    sum_all,
)
from .optim import AdamState, adam_step
from .tensor import Graph, Gradients, Tensor, as_tensor, backward, check_finite

__all__ = [
    "AdamState", "Graph", "Gradients", "Tensor", "adam_step", "add", "as_tensor", "avg_pool2",
    "backward", "bilinear_resize", "channel_norm", "check_finite", "conv2d", "dropout",
    "interp_matrix", "leaky_relu", "mean_all", "mul", "mul_scalar", "pixel_entropy", "pixel_nll",
    "relu", "softmax_over_channels", "sum_all",
]
