"""Minimal dense numerical core: kernels, layers, losses, SGD, gradient oracle."""
from team.engine.gradcheck import finite_diff_check
from team.engine.layers import (
    Affine,
    AffineLayer,
    Conv,
    Conv2D,
    Flatten,
    FlattenLayer,
    MaxPool,
    MaxPool2D,
    ReLU,
    ReLULayer,
    Sequential,
    build_layer,
    wrap_layer,
)
from team.engine.ops import (
    affine,
    affine_backward,
    conv2d_backward,
    conv2d_forward,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_bce,
    softmax,
    softmax_cross_entropy,
)
from team.engine.params import ParamBlock, sgd_step

__all__ = [
    "Affine", "AffineLayer", "Conv", "Conv2D", "Flatten", "FlattenLayer", "MaxPool",
    "MaxPool2D", "ParamBlock", "ReLU", "ReLULayer", "Sequential", "affine",
    "affine_backward", "build_layer", "conv2d_backward", "conv2d_forward",
    "finite_diff_check", "maxpool2d", "maxpool2d_backward", "relu", "relu_backward",
    "sgd_step", "sigmoid", "sigmoid_bce", "softmax", "softmax_cross_entropy", "wrap_layer",
]
