"""Architecture description and the dense (pretrained) CNN built from it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from team.engine.layers import (
    Affine,
    Conv,
    Flatten,
    MaxPool,
    ReLU,
    Sequential,
    build_layer,
    spec_from_dict,
    spec_to_dict,
    wrap_layer,
)
from team.engine.params import ParamBlock
from team.errors import ConfigError, InputError


@dataclass(frozen=True)
class ArchSpec:
    """Layer list split into a shared prefix and a decoupled suffix.

    ``layers[:split_index]`` is the shared stack. ``layers[split_index:-2]``
    holds the decoupled convs (with ReLU/MaxPool between them), and the list
    ends with ``Flatten`` and the ``Affine`` classifier.
    """

    input_shape: tuple
    layers: tuple
    split_index: int
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be [c, h, w], got {self.input_shape}")
        if self.class_count < 1:
            raise ConfigError(f"class_count must be >= 1, got {self.class_count}")
        if len(self.layers) < 3 or not isinstance(self.layers[-1], Affine) or not isinstance(self.layers[-2], Flatten):
            raise ConfigError("architecture must end with Flatten followed by the Affine classifier")
        if self.layers[-1].out_dim != self.class_count:
            raise ConfigError(f"classifier out_dim {self.layers[-1].out_dim} != class_count {self.class_count}")
        if not 0 <= self.split_index < len(self.layers) - 2:
            raise ConfigError(f"split_index {self.split_index} outside the convolutional region")
        if not isinstance(self.layers[self.split_index], Conv):
            raise ConfigError(f"layer {self.split_index} at split_index must be a Conv")
        for i, spec in enumerate(self.layers[:-2]):
            if not isinstance(spec, (Conv, ReLU, MaxPool)):
                raise ConfigError(f"layer {i}: only Conv/ReLU/MaxPool may precede Flatten, got {spec.kind}")
            if i >= self.split_index and isinstance(spec, Conv) and spec.groups != 1:
                raise ConfigError(f"layer {i}: decoupled convs must be dense (groups=1)")
        self.shapes()

    def shapes(self):
        """Per-layer input shapes, plus the final output shape."""
        shapes = [self.input_shape]
        for i, spec in enumerate(self.layers):
            try:
                shapes.append(tuple(spec.output_shape(shapes[-1])))
            except ConfigError as exc:
                raise ConfigError(f"layer {i} ({spec.kind}): {exc}") from None
        return shapes

    @property
    def decoupled_convs(self) -> list[int]:
        return [i for i in range(self.split_index, len(self.layers) - 2) if isinstance(self.layers[i], Conv)]

    @property
    def shared_out_shape(self):
        return self.shapes()[self.split_index]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [spec_to_dict(s) for s in self.layers],
            "split_index": self.split_index,
            "class_count": self.class_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ArchSpec:
        return cls(tuple(d["input_shape"]), tuple(spec_from_dict(s) for s in d["layers"]),
                   int(d["split_index"]), int(d["class_count"]))

    @classmethod
    def reference(cls, class_count: int = 10) -> ArchSpec:
        """The 1x28x28 desk architecture: one shared conv stage, two decoupled convs."""
        layers = (
            Conv(16, 1, 3), ReLU(), MaxPool(2, 2),
            Conv(32, 16, 3), ReLU(),
            Conv(32, 32, 3), ReLU(), MaxPool(2, 2),
            Flatten(), Affine(32 * 4 * 4, class_count),
        )
        return cls((1, 28, 28), layers, 3, class_count)


def split_for(layers, decoupled_layer_count: int) -> int:
    """Layer position of the first of the last ``decoupled_layer_count`` convs."""
    convs = [i for i, s in enumerate(layers[:-2]) if isinstance(s, Conv)]
    if not 1 <= decoupled_layer_count <= len(convs):
        raise ConfigError(f"cannot decouple {decoupled_layer_count} of {len(convs)} conv layers")
    return convs[-decoupled_layer_count]


class DenseModel:
    """The undecoupled CNN: pretrained source for decoupling and the FedAvg baseline."""

    def __init__(self, arch: ArchSpec, blocks: list[ParamBlock]):
        self.arch = arch
        self.blocks = list(blocks)
        expected = sum(2 for s in arch.layers if isinstance(s, (Conv, Affine)))
        if len(self.blocks) != expected:
            raise ConfigError(f"dense model needs {expected} parameter blocks, got {len(self.blocks)}")
        self.net = _wrap_all(arch.layers, self.blocks)

    @classmethod
    def init(cls, arch: ArchSpec, seed: int) -> DenseModel:
        rng = np.random.default_rng(seed)
        blocks = []
        for i, spec in enumerate(arch.layers):
            blocks.extend(build_layer(spec, rng, f"layer{i}").params())
        return cls(arch, blocks)

    def params(self) -> list[ParamBlock]:
        return list(self.blocks)

    def layer_params(self, index: int) -> list[ParamBlock]:
        """ParamBlocks (weight, bias) of ``arch.layers[index]``."""
        offset = sum(2 for s in self.arch.layers[:index] if isinstance(s, (Conv, Affine)))
        return self.blocks[offset:offset + 2]

    def forward(self, x):
        return self.net.forward(check_batch(self.arch, x))

    def logits(self, x, chunk=512):
        x = check_batch(self.arch, x)
        return np.concatenate([self.net.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)])

    def copy(self) -> DenseModel:
        return DenseModel(self.arch, [b.copy() for b in self.blocks])


def _wrap_all(specs, blocks):
    layers, it = [], iter(blocks)
    for spec in specs:
        params = (next(it), next(it)) if isinstance(spec, (Conv, Affine)) else ()
        layers.append(wrap_layer(spec, params))
    return Sequential(layers)


def wrap_shared(arch: ArchSpec, blocks) -> Sequential:
    return _wrap_all(arch.layers[:arch.split_index], blocks)


def check_batch(arch: ArchSpec, x):
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != arch.input_shape:
        raise InputError(f"batch shape {x.shape} does not match input shape [n, {', '.join(map(str, arch.input_shape))}]")
    return x
