"""Minimal dense tensors with reverse-mode differentiation for 3D detectors."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .nn import BatchNorm3d, Conv3d, Identity, Module
from .ops import (
    add, batchnorm3d, bce_with_logits, concat_channels, concat_rows, conv3d, dot_const, maxpool3d,
    mean_all, mul_scalar, reshape, rrelu, sigmoid, smooth_l1, sum_all, take, transpose,
    upsample_nearest3d,
)
from .optim import sgd_step
from .tensor import Parameter, ShapeError, StateError, Tensor, as_tensor, topological_order

__all__ = [
    "Tensor", "Parameter", "ShapeError", "StateError", "as_tensor", "topological_order",
    "add", "batchnorm3d", "bce_with_logits", "concat_channels", "concat_rows", "conv3d", "dot_const",
    "maxpool3d", "mean_all", "mul_scalar", "reshape", "rrelu", "sigmoid", "smooth_l1", "sum_all",
    "take", "transpose", "upsample_nearest3d",
    "Module", "Conv3d", "BatchNorm3d", "Identity",
    "sgd_step", "grad_check", "save_checkpoint", "load_checkpoint", "CheckpointError",
]
