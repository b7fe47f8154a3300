"""Layer specs and stateful layer objects built on the raw kernels."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from team.engine import ops
from team.engine.params import ParamBlock
from team.errors import ConfigError


@dataclass(frozen=True)
class Conv:
    out_filters: int
    in_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    groups: int = 1
    kind = "conv"

    def __post_init__(self):
        for name in ("out_filters", "in_channels", "kernel", "stride", "groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"Conv.{name} must be >= 1, got {getattr(self, name)}")
        if self.pad < 0:
            raise ConfigError(f"Conv.pad must be >= 0, got {self.pad}")
        if self.in_channels % self.groups:
            raise ConfigError(f"Conv in_channels {self.in_channels} not divisible by groups {self.groups}")
        if self.out_filters % self.groups:
            raise ConfigError(f"Conv out_filters {self.out_filters} not divisible by groups {self.groups}")

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ConfigError(f"Conv expects {self.in_channels} input channels, got {c}")
        ho = ops.conv_output_size(h, self.kernel, self.stride, self.pad)
        wo = ops.conv_output_size(w, self.kernel, self.stride, self.pad)
        if ho < 1 or wo < 1:
            raise ConfigError(f"Conv kernel {self.kernel} does not fit input {h}x{w}")
        return (self.out_filters, ho, wo)

    def param_count(self):
        return self.out_filters * (self.in_channels // self.groups) * self.kernel ** 2 + self.out_filters


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def output_shape(self, shape):
        return tuple(shape)

    def param_count(self):
        return 0


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2
    stride: int = 2
    kind = "maxpool"

    def output_shape(self, shape):
        c, h, w = shape
        if self.kernel > h or self.kernel > w:
            raise ConfigError(f"MaxPool kernel {self.kernel} larger than input {h}x{w}")
        return (c, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)

    def param_count(self):
        return 0


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def output_shape(self, shape):
        return (math.prod(shape),)

    def param_count(self):
        return 0


@dataclass(frozen=True)
class Affine:
    in_dim: int
    out_dim: int
    kind = "affine"

    def output_shape(self, shape):
        if tuple(shape) != (self.in_dim,):
            raise ConfigError(f"Affine expects input dim {self.in_dim}, got {shape}")
        return (self.out_dim,)

    def param_count(self):
        return self.in_dim * self.out_dim + self.out_dim


SPEC_KINDS = {cls.kind: cls for cls in (Conv, ReLU, MaxPool, Flatten, Affine)}


def spec_to_dict(spec) -> dict:
    return {"kind": spec.kind, **asdict(spec)}


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in SPEC_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}; expected one of {sorted(SPEC_KINDS)}")
    try:
        return SPEC_KINDS[kind](**d)
    except TypeError as exc:
        raise ConfigError(f"bad fields for {kind} layer: {exc}") from None


def he_normal(rng, shape, fan_in, dtype=np.float32):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    spec = None

    def params(self) -> list[ParamBlock]:
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, upstream):
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, spec: Conv, weight: ParamBlock, bias: ParamBlock):
        self.spec = spec
        self.weight = weight
        self.bias = bias
        self.need_input_grad = True
        self._x = None

    @classmethod
    def init(cls, spec: Conv, rng, name=""):
        shape = (spec.out_filters, spec.in_channels // spec.groups, spec.kernel, spec.kernel)
        fan_in = shape[1] * spec.kernel ** 2
        w = ParamBlock(he_normal(rng, shape, fan_in), name=f"{name}.weight")
        b = ParamBlock(np.zeros(spec.out_filters, np.float32), name=f"{name}.bias")
        return cls(spec, w, b)

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._x = x
        s = self.spec
        return ops.conv2d_forward(x, self.weight, self.bias, s.stride, s.pad, s.groups)

    def backward(self, upstream):
        s = self.spec
        dx, _, db = ops.conv2d_backward(self._x, self.weight, upstream, s.stride, s.pad, s.groups,
                                        need_input=self.need_input_grad)
        self.bias.grad += db.astype(self.bias.grad.dtype)
        return dx


class ReLULayer(Layer):
    spec = ReLU()

    def forward(self, x):
        self._x = x
        return ops.relu(x)

    def backward(self, upstream):
        return ops.relu_backward(upstream, self._x)


class MaxPool2D(Layer):
    def __init__(self, spec: MaxPool):
        self.spec = spec

    def forward(self, x):
        self._shape = x.shape
        out, self._argmax = ops.maxpool2d(x, self.spec.kernel, self.spec.stride)
        return out

    def backward(self, upstream):
        return ops.maxpool2d_backward(upstream, self._argmax, self._shape)


class FlattenLayer(Layer):
    spec = Flatten()

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, upstream):
        return upstream.reshape(self._shape)


class AffineLayer(Layer):
    def __init__(self, spec: Affine, weight: ParamBlock, bias: ParamBlock):
        self.spec = spec
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, spec: Affine, rng, name=""):
        w = ParamBlock(he_normal(rng, (spec.in_dim, spec.out_dim), spec.in_dim), name=f"{name}.weight")
        b = ParamBlock(np.zeros(spec.out_dim, np.float32), name=f"{name}.bias")
        return cls(spec, w, b)

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._x = x
        return ops.affine(x, self.weight, self.bias)

    def backward(self, upstream):
        dx, _, db = ops.affine_backward(self._x, self.weight, upstream)
        self.bias.grad += db.astype(self.bias.grad.dtype)
        return dx


def build_layer(spec, rng, name=""):
    """Instantiate a freshly He-initialised layer for ``spec``."""
    if isinstance(spec, Conv):
        return Conv2D.init(spec, rng, name)
    if isinstance(spec, Affine):
        return AffineLayer.init(spec, rng, name)
    if isinstance(spec, ReLU):
        return ReLULayer()
    if isinstance(spec, MaxPool):
        return MaxPool2D(spec)
    if isinstance(spec, Flatten):
        return FlattenLayer()
    raise ConfigError(f"cannot build layer from {spec!r}")


def wrap_layer(spec, params=()):
    """Build a layer around existing ParamBlocks (no copy)."""
    if isinstance(spec, Conv):
        return Conv2D(spec, *params)
    if isinstance(spec, Affine):
        return AffineLayer(spec, *params)
    return build_layer(spec, None)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, upstream):
        for layer in reversed(self.layers):
            upstream = layer.backward(upstream)
        return upstream

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()
