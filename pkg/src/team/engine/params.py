from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from team.errors import ConfigError


@dataclass(eq=False)
class ParamBlock:
    """A trainable (or frozen) parameter array with its gradient buffer."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)
    trainable: bool = True
    name: str = ""

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ConfigError(f"grad shape {self.grad.shape} != value shape {self.value.shape} for {self.name!r}")

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad[...] = 0

    def copy(self) -> ParamBlock:
        return ParamBlock(self.value.copy(), self.grad.copy(), self.trainable, self.name)

    def astype(self, dtype) -> ParamBlock:
        return ParamBlock(self.value.astype(dtype), self.grad.astype(dtype), self.trainable, self.name)


def sgd_step(blocks: Iterable[ParamBlock], lr_map: Mapping[str, float] | float,
             default_lr: float | None = None) -> None:
    """Plain SGD on every trainable block, then zero all gradients.

    ``lr_map`` is either one rate for everything or a mapping from block
    name to rate; names missing from the mapping fall back to ``default_lr``.
    """
    blocks = list(blocks)
    if not isinstance(lr_map, Mapping):
        default_lr, lr_map = float(lr_map), {}
    for rate in list(lr_map.values()) + ([] if default_lr is None else [default_lr]):
        if not rate >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {rate}")
    for block in blocks:
        if block.trainable:
            lr = lr_map.get(block.name, default_lr)
            if lr is None:
                raise ConfigError(f"no learning rate for trainable block {block.name!r}")
            if lr:
                block.value -= block.value.dtype.type(lr) * block.grad
        block.zero_grad()
