"""Reverse-mode autodiff over dense numpy arrays, with 3-D conv/pool kernels."""

from . import kernels
from .gradcheck import finite_diff_grad, max_rel_error, small_entries_ok
from .ops import (
    BatchNormState,
    PoolIndices,
    batchnorm,
    concat_channels,
    conv3d,
    im2col,
    inner,
    masked_mse,
    max_unpool3d,
    maxpool3d,
    relu,
    sum_all,
)
from .tensor import Node, Tape, Tensor, as_dtype, backward, is_grad_enabled, no_grad

__all__ = [
    "BatchNormState", "Node", "PoolIndices", "Tape", "Tensor", "as_dtype", "backward",
    "batchnorm", "concat_channels", "conv3d", "finite_diff_grad", "im2col", "inner",
    "is_grad_enabled", "kernels", "masked_mse", "max_rel_error", "max_unpool3d",
    "maxpool3d", "no_grad", "relu", "small_entries_ok", "sum_all",
]
