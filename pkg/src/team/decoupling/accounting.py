"""Exact parameter and byte counts (4 bytes per float32 parameter)."""
from __future__ import annotations

from team.decoupling.arch import DenseModel
from team.decoupling.model import CriticalPath, GlobalModel, SpecializedModel
from team.engine.layers import Layer
from team.engine.params import ParamBlock

BYTES_PER_PARAM = 4


def _entry(count: int) -> dict:
    return {"param_count": int(count), "bytes": BYTES_PER_PARAM * int(count)}


def path_accounting(path: CriticalPath) -> dict:
    conv = sum(b.size for b in path.blocks[:-2])
    head = sum(b.size for b in path.blocks[-2:])
    return {**_entry(conv + head), "conv": _entry(conv), "head": _entry(head)}


def param_accounting(obj) -> dict:
    """Counts for a model, a path, a layer (or layer spec) or a single ParamBlock.

    Models report ``shared``, per-path entries, the summed ``heads`` and the
    total; ``paths`` is keyed by class label.
    """
    if isinstance(obj, ParamBlock):
        return _entry(obj.size)
    if isinstance(obj, CriticalPath):
        return path_accounting(obj)
    if isinstance(obj, (GlobalModel, SpecializedModel)):
        shared = sum(b.size for b in obj.shared)
        paths = {p.class_label: path_accounting(p) for p in obj.paths}
        heads = sum(p["head"]["param_count"] for p in paths.values())
        total = shared + sum(p["param_count"] for p in paths.values())
        return {**_entry(total), "shared": _entry(shared), "paths": paths, "heads": _entry(heads)}
    if isinstance(obj, DenseModel):
        per_layer = {}
        for i, spec in enumerate(obj.arch.layers):
            blocks = obj.layer_params(i) if spec.param_count() else []
            if blocks:
                per_layer[i] = _entry(sum(b.size for b in blocks))
        shared = sum(per_layer[i]["param_count"] for i in per_layer if i < obj.arch.split_index)
        return {**_entry(sum(b.size for b in obj.blocks)), "shared": _entry(shared), "layers": per_layer}
    if isinstance(obj, Layer):
        return _entry(sum(b.size for b in obj.params()))
    if hasattr(obj, "param_count"):
        return _entry(obj.param_count())
    raise TypeError(f"cannot account parameters of {type(obj).__name__}")
