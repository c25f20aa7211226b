from .tensor import NonFiniteError, Tensor, check_finite, no_grad
from .functional import (
    BatchNormParams,
    ConvParams,
    batch_norm,
    bilinear_resize,
    concat_channels,
    conv2d,
    elementwise_add,
    max_pool2d,
    relu,
    slice_channels,
    smooth_l1,
    softmax_cross_entropy,
)
from .layers import BatchNorm2d, Conv2d, Module
from .optim import SGD, sgd_momentum_step
from .gradcheck import GradCheckReport, grad_check

__all__ = [
    "BatchNorm2d",
    "BatchNormParams",
    "Conv2d",
    "ConvParams",
    "GradCheckReport",
    "Module",
    "NonFiniteError",
    "SGD",
    "Tensor",
    "batch_norm",
    "bilinear_resize",
    "check_finite",
    "concat_channels",
    "conv2d",
    "elementwise_add",
    "grad_check",
    "max_pool2d",
    "no_grad",
    "relu",
    "sgd_momentum_step",
    "slice_channels",
    "smooth_l1",
    "softmax_cross_entropy",
]
