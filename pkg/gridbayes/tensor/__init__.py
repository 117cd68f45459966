"""
Dense tensor engine with reverse-mode differentiation.

Exports:
- Tensor, backward, no_grad, float64_mode: graph recording and backprop
- ops: the differentiable operations the network is made of
- adam_step / AdamState: the optimizer
"""

from .core import Function, Tensor, backward, default_dtype, float64_mode, is_grad_enabled, no_grad
from .ops import (
    BN_EPS,
    BN_MOMENTUM,
    PROB_FLOOR,
    RunningStats,
    add,
    batch_norm,
    check_finite,
    concat_channels,
    conv2d_dilated,
    gaussian_kl,
    mul,
    relu,
    reparameterize,
    softmax_cells,
    softplus,
    tensor_sum,
    weighted_nll,
)
from .optim import AdamState, adam_step

__all__ = [
    "Function",
    "Tensor",
    "backward",
    "default_dtype",
    "float64_mode",
    "is_grad_enabled",
    "no_grad",
    "BN_EPS",
    "BN_MOMENTUM",
    "PROB_FLOOR",
    "RunningStats",
    "add",
    "batch_norm",
    "check_finite",
    "concat_channels",
    "conv2d_dilated",
    "gaussian_kl",
    "mul",
    "relu",
    "reparameterize",
    "softmax_cells",
    "softplus",
    "tensor_sum",
    "weighted_nll",
    "AdamState",
    "adam_step",
]
