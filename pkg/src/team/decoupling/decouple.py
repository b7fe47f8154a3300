"""Class-conditional filter scoring, path assignment and weight slicing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from team.data import Dataset
from team.decoupling.arch import DenseModel
from team.decoupling.model import CriticalPath, GlobalModel
from team.engine.layers import Conv, ReLU
from team.engine.params import ParamBlock
from team.errors import ConfigError, InputError


@dataclass(frozen=True)
class DecoupleConfig:
    """``decoupled_layer_count=3, path_fraction=0.04`` is the "3_4%" setting."""

    decoupled_layer_count: int
    path_fraction: float
    num_paths: int
    calib_samples_per_class: int = 0  # 0 uses every calibration sample

    def __post_init__(self):
        if self.decoupled_layer_count < 1:
            raise ConfigError(f"decoupled_layer_count must be >= 1, got {self.decoupled_layer_count}")
        if not 0 < self.path_fraction <= 1:
            raise ConfigError(f"path_fraction must be in (0, 1], got {self.path_fraction}")
        if self.num_paths < 1:
            raise ConfigError(f"num_paths must be >= 1, got {self.num_paths}")
        if self.calib_samples_per_class < 0:
            raise ConfigError("calib_samples_per_class must be >= 0")

    def width(self, filters: int) -> int:
        # round() guards against 0.07 * 100 == 7.000000000000001
        k = math.ceil(round(self.path_fraction * filters, 9))
        if k < 1:
            raise ConfigError(f"path_fraction {self.path_fraction} selects no filter out of {filters}")
        return k


@dataclass(frozen=True)
class PathAssignment:
    """Selected source filters per class, per decoupled conv (ascending indices)."""

    layers: tuple
    selections: dict  # class -> tuple of index tuples, one per entry of ``layers``

    def for_class(self, label):
        return self.selections[label]


def _class_indices(labels, class_count):
    groups = []
    for c in range(class_count):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise InputError(f"calibration set has no samples for class {c}")
        groups.append(idx)
    return groups


def _layer_activations(pretrained: DenseModel, x, layer_ids, chunk=256):
    """Per-sample mean |activation| per filter at each requested conv (after its ReLU)."""
    layers = pretrained.net.layers
    specs = pretrained.arch.layers
    taps = {}
    for lid in layer_ids:
        taps[lid + 1 if lid + 1 < len(specs) and isinstance(specs[lid + 1], ReLU) else lid] = lid
    last = max(taps)
    out = {lid: [] for lid in layer_ids}
    for i in range(0, len(x), chunk):
        h = x[i:i + chunk]
        for pos in range(last + 1):
            h = layers[pos].forward(h)
            if pos in taps:
                out[taps[pos]].append(np.abs(h).astype(np.float64).mean(axis=(2, 3)))
    return {lid: np.concatenate(v) for lid, v in out.items()}


def score_filter_importance(pretrained: DenseModel, calib_set: Dataset, layer_id: int) -> np.ndarray:
    """Importance ``[class, filter]``: mean over the class's samples of the filter's
    map L1 norm divided by the map size."""
    return score_all_layers(pretrained, calib_set, [layer_id])[layer_id]


def score_all_layers(pretrained: DenseModel, calib_set: Dataset, layer_ids=None) -> dict:
    arch = pretrained.arch
    layer_ids = list(arch.decoupled_convs if layer_ids is None else layer_ids)
    for lid in layer_ids:
        if lid not in arch.decoupled_convs:
            raise InputError(f"layer {lid} is not a decoupled conv layer (those are {arch.decoupled_convs})")
    groups = _class_indices(calib_set.labels, arch.class_count)
    acts = _layer_activations(pretrained, calib_set.images, layer_ids)
    # sorting first makes each class mean independent of sample order
    return {lid: np.stack([np.sort(a[g], axis=0).mean(axis=0) for g in groups]) for lid, a in acts.items()}


def build_path_assignment(importance: dict, cfg: DecoupleConfig) -> PathAssignment:
    """Top ``ceil(p * F)`` filters per class and layer; ties go to the lower index."""
    layers = tuple(sorted(importance))
    if len(layers) != cfg.decoupled_layer_count:
        raise ConfigError(f"importance given for {len(layers)} layers, config decouples {cfg.decoupled_layer_count}")
    classes = {importance[lid].shape[0] for lid in layers}
    if classes != {cfg.num_paths}:
        raise ConfigError(f"importance rows {sorted(classes)} != num_paths {cfg.num_paths}")
    selections = {}
    for c in range(cfg.num_paths):
        per_layer = []
        for lid in layers:
            row = np.asarray(importance[lid][c])
            k = cfg.width(row.size)
            order = np.argsort(-row, kind="stable")
            per_layer.append(tuple(sorted(int(i) for i in order[:k])))
        selections[c] = tuple(per_layer)
    return PathAssignment(layers, selections)


def _calibration_subset(calib_set: Dataset, per_class: int) -> Dataset:
    if not per_class:
        return calib_set
    keep = np.concatenate([np.flatnonzero(calib_set.labels == c)[:per_class]
                           for c in np.unique(calib_set.labels)])
    return calib_set.subset(np.sort(keep))


def slice_path(pretrained: DenseModel, selection, label: int, path_id: int | None = None) -> CriticalPath:
    """Copy one class's filters out of the pretrained decoupled layers and classifier."""
    arch = pretrained.arch
    pid = label if path_id is None else path_id
    blocks = []
    prev = None
    for lid, sel in zip(arch.decoupled_convs, selection):
        w, b = pretrained.layer_params(lid)
        sel = np.asarray(sel)
        wv = w.value[sel]
        if prev is not None:
            wv = wv[:, prev]
        blocks.append(ParamBlock(np.ascontiguousarray(wv), name=f"path{pid}.layer{lid}.weight"))
        blocks.append(ParamBlock(b.value[sel].copy(), name=f"path{pid}.layer{lid}.bias"))
        prev = sel
    # classifier rows are channel-major: feature index = filter * H * W + position
    last_shape = arch.shapes()[len(arch.layers) - 2]
    hw = int(np.prod(last_shape[1:]))
    rows = (prev[:, None] * hw + np.arange(hw)[None, :]).ravel()
    cw, cb = pretrained.layer_params(len(arch.layers) - 1)
    blocks.append(ParamBlock(cw.value[rows, label:label + 1].copy(), name=f"path{pid}.head.weight"))
    blocks.append(ParamBlock(cb.value[label:label + 1].copy(), name=f"path{pid}.head.bias"))
    return CriticalPath(pid, label, blocks, tuple(tuple(int(i) for i in s) for s in selection))


def decouple(pretrained: DenseModel, cfg: DecoupleConfig, calib_set: Dataset) -> GlobalModel:
    """Split a pretrained dense CNN into frozen shared layers and one critical path per class."""
    arch = pretrained.arch
    if cfg.num_paths != arch.class_count:
        raise ConfigError(f"num_paths {cfg.num_paths} must equal the pretrained class count {arch.class_count}")
    if len(arch.decoupled_convs) != cfg.decoupled_layer_count:
        raise ConfigError(
            f"architecture decouples {len(arch.decoupled_convs)} conv layers from split_index "
            f"{arch.split_index}, config asks for {cfg.decoupled_layer_count}"
        )
    importance = score_all_layers(pretrained, _calibration_subset(calib_set, cfg.calib_samples_per_class))
    assignment = build_path_assignment(importance, cfg)
    shared = []
    for b in pretrained.blocks[:sum(2 for s in arch.layers[:arch.split_index] if isinstance(s, Conv))]:
        frozen = b.copy()
        frozen.trainable = False
        shared.append(frozen)
    paths = [slice_path(pretrained, assignment.for_class(c), c) for c in range(arch.class_count)]
    return GlobalModel(arch, shared, paths, version=0)
