"""Critical paths and the global / specialized models assembled from them."""
from __future__ import annotations

import copy
import enum
from dataclasses import dataclass

import numpy as np

from team.decoupling.arch import ArchSpec, check_batch, wrap_shared
from team.engine import ops
from team.engine.layers import Affine, Conv, Flatten, Sequential, wrap_layer
from team.engine.params import ParamBlock
from team.errors import ConfigError, InputError

CHUNK = 256


class TaskMode(str, enum.Enum):
    CLOSED_SET = "closed_set"
    ONE_VS_ALL = "one_vs_all"


def path_specs(arch: ArchSpec, widths) -> list:
    """Layer specs of one path: the decoupled suffix narrowed to ``widths`` filters."""
    convs = arch.decoupled_convs
    if len(widths) != len(convs):
        raise ConfigError(f"{len(widths)} path widths for {len(convs)} decoupled convs")
    channels = arch.shared_out_shape[0]
    shape = arch.shared_out_shape
    specs, j = [], 0
    for i in range(arch.split_index, len(arch.layers) - 2):
        spec = arch.layers[i]
        if isinstance(spec, Conv):
            spec = Conv(int(widths[j]), channels, spec.kernel, spec.stride, spec.pad, 1)
            channels = spec.out_filters
            j += 1
        shape = spec.output_shape(shape)
        specs.append(spec)
    specs.append(Flatten())
    specs.append(Affine(int(np.prod(shape)), 1))
    return specs


@dataclass(eq=False)
class CriticalPath:
    """One class's private slice of the decoupled layers plus its scalar-logit head.

    ``blocks`` alternates weight/bias for each decoupled conv, then the head
    weight and bias. ``filters`` records the source filter indices per
    decoupled conv (empty for randomly initialised paths).
    """

    path_id: int
    class_label: int
    blocks: list
    filters: tuple = ()

    def params(self) -> list[ParamBlock]:
        return list(self.blocks)

    @property
    def widths(self) -> tuple:
        return tuple(int(b.value.shape[0]) for b in self.blocks[:-2][::2])

    @property
    def param_count(self) -> int:
        return sum(b.size for b in self.blocks)

    def network(self, arch: ArchSpec) -> Sequential:
        specs = path_specs(arch, self.widths)
        layers, it = [], iter(self.blocks)
        for spec in specs:
            params = (next(it), next(it)) if isinstance(spec, (Conv, Affine)) else ()
            layers.append(wrap_layer(spec, params))
        return Sequential(layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([b.value.ravel() for b in self.blocks]).astype(np.float32)

    def load_flat(self, vec) -> None:
        vec = np.asarray(vec, np.float32)
        if vec.size != self.param_count:
            raise InputError(f"path {self.path_id}: flat vector has {vec.size} values, expected {self.param_count}")
        offset = 0
        for b in self.blocks:
            b.value = vec[offset:offset + b.size].reshape(b.value.shape).copy()
            offset += b.size

    def copy(self) -> CriticalPath:
        return CriticalPath(self.path_id, self.class_label, [b.copy() for b in self.blocks], self.filters)


def _logits(arch, shared_blocks, paths, x):
    x = check_batch(arch, x)
    shared = wrap_shared(arch, shared_blocks)
    nets = [p.network(arch) for p in paths]
    out = np.empty((len(x), len(paths)), np.float32)
    for i in range(0, len(x), CHUNK):
        feats = shared.forward(x[i:i + CHUNK])
        for j, net in enumerate(nets):
            out[i:i + CHUNK, j] = net.forward(feats)[:, 0]
    return out


@dataclass(eq=False)
class GlobalModel:
    arch: ArchSpec
    shared: list
    paths: list
    version: int = 0

    def __post_init__(self):
        self.paths = sorted(self.paths, key=lambda p: p.class_label)
        labels = [p.class_label for p in self.paths]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate path class labels: {labels}")

    @property
    def labels(self) -> list[int]:
        return [p.class_label for p in self.paths]

    def path(self, label: int) -> CriticalPath:
        for p in self.paths:
            if p.class_label == label:
                return p
        raise InputError(f"no critical path for class {label}")

    def params(self) -> list[ParamBlock]:
        return list(self.shared) + [b for p in self.paths for b in p.blocks]

    def logits(self, x) -> np.ndarray:
        """Logit per path (ascending class label) for every sample."""
        return _logits(self.arch, self.shared, self.paths, x)

    def copy(self) -> GlobalModel:
        return copy.deepcopy(self)


@dataclass(eq=False)
class SpecializedModel:
    arch: ArchSpec
    shared: list
    paths: list
    task_mode: TaskMode = TaskMode.CLOSED_SET
    version: int = 0

    def __post_init__(self):
        self.task_mode = TaskMode(self.task_mode)
        self.paths = sorted(self.paths, key=lambda p: p.class_label)
        if not self.paths:
            raise InputError("a specialized model needs at least one critical path")
        if self.task_mode is TaskMode.CLOSED_SET and len(self.paths) < 2:
            raise InputError("closed-set task mode requires at least 2 paths")
        if self.task_mode is TaskMode.ONE_VS_ALL and len(self.paths) != 1:
            raise InputError("one-vs-all task mode requires exactly 1 path")

    @property
    def labels(self) -> list[int]:
        return [p.class_label for p in self.paths]

    def params(self) -> list[ParamBlock]:
        return list(self.shared) + [b for p in self.paths for b in p.blocks]

    def logits(self, x) -> np.ndarray:
        return _logits(self.arch, self.shared, self.paths, x)

    def copy(self) -> SpecializedModel:
        return copy.deepcopy(self)


def extract_specialized(global_model: GlobalModel, class_set, task_mode=TaskMode.CLOSED_SET) -> SpecializedModel:
    """Copy the shared blocks and exactly the requested paths into a deployable model."""
    class_set = sorted({int(c) for c in class_set})
    if not class_set:
        raise InputError("class_set must not be empty")
    known = set(global_model.labels)
    unknown = [c for c in class_set if c not in known]
    if unknown:
        raise InputError(f"unknown class labels {unknown}; global model has {sorted(known)}")
    paths = [global_model.path(c).copy() for c in class_set]
    return SpecializedModel(global_model.arch, [b.copy() for b in global_model.shared], paths,
                            TaskMode(task_mode), global_model.version)


def forward_specialized(model: SpecializedModel, batch) -> np.ndarray:
    """Scores per sample: softmax over path logits, or the single path's sigmoid."""
    logits = model.logits(batch)
    if model.task_mode is TaskMode.ONE_VS_ALL:
        return ops.sigmoid(logits)
    return ops.softmax(logits)
