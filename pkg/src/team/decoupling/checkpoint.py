"""Self-describing binary model container.

Layout::

    b"TEAM" | u16 format version | u32 header length | header (UTF-8 JSON)
    shared / dense ParamBlocks in declaration order (little-endian float32)
    per path, in ascending class label: i64 label, then its ParamBlocks

The header carries the ArchSpec plus the shape, name and freeze flag of
every block, so a file can be decoded without outside knowledge.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from team.decoupling.arch import ArchSpec, DenseModel
from team.decoupling.model import CriticalPath, GlobalModel, SpecializedModel, TaskMode
from team.engine.params import ParamBlock
from team.errors import FormatError

MAGIC = b"TEAM"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def _meta(block: ParamBlock) -> dict:
    return {"name": block.name, "shape": list(block.value.shape), "trainable": bool(block.trainable)}


def _header(model) -> dict:
    if isinstance(model, DenseModel):
        return {"kind": "dense", "arch": model.arch.to_dict(), "blocks": [_meta(b) for b in model.blocks]}
    head = {
        "kind": "global" if isinstance(model, GlobalModel) else "specialized",
        "arch": model.arch.to_dict(),
        "version": int(model.version),
        "shared": [_meta(b) for b in model.shared],
        "paths": [
            {"path_id": int(p.path_id), "class_label": int(p.class_label),
             "filters": [list(f) for f in p.filters], "blocks": [_meta(b) for b in p.blocks]}
            for p in model.paths
        ],
    }
    if isinstance(model, SpecializedModel):
        head["task_mode"] = model.task_mode.value
    return head


def dumps(model) -> bytes:
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode()
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)), header]
    blocks = model.blocks if isinstance(model, DenseModel) else model.shared
    parts.extend(np.asarray(b.value, "<f4").tobytes() for b in blocks)
    if not isinstance(model, DenseModel):
        for p in model.paths:
            parts.append(struct.pack("<q", p.class_label))
            parts.extend(np.asarray(b.value, "<f4").tobytes() for b in p.blocks)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated while reading {what}", offset=self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def block(self, meta):
        count = int(np.prod(meta["shape"], dtype=np.int64))
        start = self.pos
        raw = self.take(4 * count, f"block {meta['name']!r}")
        value = np.frombuffer(raw, "<f4").astype(np.float32).reshape(meta["shape"])
        if not np.all(np.isfinite(value)):
            raise FormatError(f"non-finite values in block {meta['name']!r}", offset=start)
        return ParamBlock(value.copy(), trainable=meta["trainable"], name=meta["name"])


def loads(buf: bytes):
    r = _Reader(buf)
    magic, version, hlen = _PREFIX.unpack(r.take(_PREFIX.size, "prefix"))
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version}", offset=4)
    try:
        head = json.loads(r.take(hlen, "header").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", offset=_PREFIX.size) from None
    arch = ArchSpec.from_dict(head["arch"])
    if head["kind"] == "dense":
        model = DenseModel(arch, [r.block(m) for m in head["blocks"]])
    else:
        shared = [r.block(m) for m in head["shared"]]
        paths = []
        for pm in head["paths"]:
            at = r.pos
            (label,) = struct.unpack("<q", r.take(8, "path label"))
            if label != pm["class_label"]:
                raise FormatError(f"path label {label} does not match header {pm['class_label']}", offset=at)
            paths.append(CriticalPath(pm["path_id"], label, [r.block(m) for m in pm["blocks"]],
                                      tuple(tuple(f) for f in pm["filters"])))
        if head["kind"] == "global":
            model = GlobalModel(arch, shared, paths, head["version"])
        else:
            model = SpecializedModel(arch, shared, paths, TaskMode(head["task_mode"]), head["version"])
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last block", offset=r.pos)
    return model


def save(model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path):
    return loads(Path(path).read_bytes())
