from .nn import (
    BatchNormState,
    batchnorm,
    bilinear_resize,
    conv2d,
    conv2d_loops,
    dense,
    interpolation_matrix,
    log_softmax,
    maxpool2d,
    relu,
    softmax,
)
from .optim import AdamState, adam_step, zero_grad
from .tensor import DTYPE, Tensor, as_tensor, is_grad_enabled, make_op, no_grad, ones, stack, zeros

__all__ = [
    "DTYPE",
    "AdamState",
    "BatchNormState",
    "Tensor",
    "adam_step",
    "as_tensor",
    "batchnorm",
    "bilinear_resize",
    "conv2d",
    "conv2d_loops",
    "dense",
    "interpolation_matrix",
    "is_grad_enabled",
    "log_softmax",
    "make_op",
    "maxpool2d",
    "no_grad",
    "ones",
    "relu",
    "softmax",
    "stack",
    "zero_grad",
    "zeros",
]
