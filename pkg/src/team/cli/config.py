"""Strict YAML experiment files: schema, defaults, validation with key locators."""
from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from team.errors import ConfigFileError
from team.federation import derive_seed

REQUIRED = object()
U64_MAX = 2 ** 64 - 1


@dataclass(frozen=True)
class Field:
    kind: str  # int | float | bool | str | ints | layers
    default: object = None
    check: object = None  # value -> error text or None
    choices: tuple = ()


@dataclass(frozen=True)
class Section:
    fields: dict
    many: bool = False  # a list of such mappings


def _ge(lo):
    return lambda v: None if v >= lo else f"must be >= {lo}, got {v}"


def _gt(lo):
    return lambda v: None if v > lo else f"must be > {lo}, got {v}"


def _fraction(v):
    return None if 0 <= v <= 1 else f"must be within [0, 1], got {v}"


def _nonempty(v):
    return None if v else "must not be empty"


SCHEMA = Section({
    "seed": Field("int", REQUIRED, lambda v: None if 0 <= v <= U64_MAX else f"must be a u64, got {v}"),
    "out_dir": Field("str", "out"),
    "data": Section({
        "source": Field("str", "synthetic", choices=("synthetic", "idx", "mnist5k")),
        "images": Field("str", None),
        "labels": Field("str", None),
        "classes": Field("ints", None, _nonempty),
        "synthetic": Section({
            "classes": Field("int", 4, _ge(2)),
            "samples_per_class": Field("int", 50, _ge(1)),
            "image_size": Field("int", 28, _ge(4)),
            "noise_sigma": Field("float", 0.1, _ge(0)),
        }),
        "split": Section({
            "cloud": Field("float", 0.2, _fraction),
            "devices": Field("float", 0.6, _fraction),
            "test": Field("float", 0.2, _fraction),
        }),
    }),
    "arch": Section({
        "preset": Field("str", "reference", choices=("reference", "custom")),
        "input_shape": Field("ints", None),
        "layers": Field("layers", None),
        "split_index": Field("int", None, _ge(1)),
    }),
    "pretrain": Section({
        "epochs": Field("int", 2, _ge(1)),
        "batch_size": Field("int", 32, _ge(1)),
        "lr": Field("float", 0.05, _gt(0)),
    }),
    "decouple": Section({
        "decoupled_layer_count": Field("int", 2, _ge(1)),
        "path_fraction": Field("float", 0.125, lambda v: None if 0 < v <= 1 else f"must be within (0, 1], got {v}"),
        "calib_samples_per_class": Field("int", 20, _ge(0)),
    }),
    "partition": Section({
        "imbalance_factor": Field("float", 1.0, _ge(1)),
    }),
    "train": Section({
        "epochs": Field("int", 1, _ge(1)),
        "batch_size": Field("int", 32, _ge(1)),
        "base_lr": Field("float", 0.05, _ge(0)),
        "freeze_shared": Field("bool", True),
    }),
    "devices": Section({
        "id": Field("int", REQUIRED, _ge(0)),
        "classes": Field("ints", REQUIRED, _nonempty),
        "task_mode": Field("str", None, choices=("closed_set", "one_vs_all")),
        "data_classes": Field("ints", None, _nonempty),
        "fail_rounds": Field("ints", []),
    }, many=True),
    "federation": Section({
        "rounds": Field("int", 10, _ge(1)),
        "weighted": Field("bool", False),
        "baseline": Field("bool", True),
    }),
    "incremental": Section({
        "old_classes": Field("int", 5, _ge(1)),
        "new_classes": Field("ints", [5, 6], _nonempty),
        "new_path_lr_multiplier": Field("float", 10.0, _gt(0)),
        "old_rounds": Field("int", 5, _ge(0)),
        "rounds": Field("int", 10, _ge(1)),
    }),
    "report": Section({
        "timeline": Field("str", None),
        "baseline_timeline": Field("str", None),
    }),
})

_TYPE_NAMES = {"int": "an integer", "float": "a number", "bool": "a boolean", "str": "a string",
               "ints": "a list of integers", "layers": "a list of layer mappings"}


def _coerce(kind, v):
    """Return ``(value, ok)``; no silent conversions beyond int -> float."""
    if kind == "int":
        return v, isinstance(v, int) and not isinstance(v, bool)
    if kind == "float":
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        return (float(v) if ok else v), ok
    if kind == "bool":
        return v, isinstance(v, bool)
    if kind == "str":
        return v, isinstance(v, str)
    if kind == "ints":
        ok = isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in v)
        return v, ok
    if kind == "layers":
        return v, isinstance(v, list) and all(isinstance(x, dict) for x in v)
    raise AssertionError(kind)


def _validate(raw, section: Section, loc: str, errors: list):
    if not isinstance(raw, dict):
        errors.append(f"{loc or '<root>'}: expected a mapping, got {type(raw).__name__}")
        return _defaults(section)
    out = {}
    for key in sorted(set(raw) - set(section.fields), key=str):
        errors.append(f"{loc}{'.' if loc else ''}{key}: unknown key")
    for key, spec in section.fields.items():
        where = f"{loc}{'.' if loc else ''}{key}"
        if isinstance(spec, Section):
            if spec.many:
                items = raw.get(key, [])
                if not isinstance(items, list):
                    errors.append(f"{where}: expected a list, got {type(items).__name__}")
                    items = []
                out[key] = [_validate(item, Section(spec.fields), f"{where}[{i}]", errors)
                            for i, item in enumerate(items)]
            else:
                out[key] = _validate(raw.get(key, {}) if raw.get(key) is not None else {}, spec, where, errors)
            continue
        if key not in raw or raw[key] is None:
            if spec.default is REQUIRED:
                errors.append(f"{where}: missing required key")
            out[key] = None if spec.default is REQUIRED else copy.deepcopy(spec.default)
            continue
        value, ok = _coerce(spec.kind, raw[key])
        if not ok:
            errors.append(f"{where}: expected {_TYPE_NAMES[spec.kind]}, got {raw[key]!r}")
            out[key] = copy.deepcopy(spec.default) if spec.default is not REQUIRED else None
            continue
        if spec.choices and value not in spec.choices:
            errors.append(f"{where}: must be one of {list(spec.choices)}, got {value!r}")
        elif spec.check is not None:
            msg = spec.check(value)
            if msg:
                errors.append(f"{where}: {msg}")
        out[key] = value
    return out


def _defaults(section: Section):
    out = {}
    for key, spec in section.fields.items():
        if isinstance(spec, Section):
            out[key] = [] if spec.many else _defaults(spec)
        else:
            out[key] = None if spec.default is REQUIRED else copy.deepcopy(spec.default)
    return out


def _cross_checks(v: dict, errors: list):
    data = v["data"]
    split = data["split"]
    total = split["cloud"] + split["devices"] + split["test"]
    if abs(total - 1.0) > 1e-9:
        errors.append(f"data.split: fractions must sum to 1, got {total}")
    if data["source"] == "idx":
        for key in ("images", "labels"):
            if not data[key]:
                errors.append(f"data.{key}: required when data.source is 'idx'")
    if data["classes"] is not None:
        c = data["classes"]
        if sorted(c) != list(range(len(c))):
            errors.append(f"data.classes: must be the labels 0..k-1, got {c}")
    arch = v["arch"]
    if arch["preset"] == "custom":
        for key in ("input_shape", "layers", "split_index"):
            if arch[key] is None:
                errors.append(f"arch.{key}: required when arch.preset is 'custom'")
    ids = [d["id"] for d in v["devices"]]
    seen = set()
    for i, dev_id in enumerate(ids):
        if dev_id is not None and dev_id in seen:
            errors.append(f"devices[{i}].id: duplicate device id {dev_id}")
        seen.add(dev_id)
    for i, d in enumerate(v["devices"]):
        if d["task_mode"] == "one_vs_all" and d["classes"] and len(d["classes"]) != 1:
            errors.append(f"devices[{i}].classes: one_vs_all needs exactly one class")
    inc = v["incremental"]
    clash = sorted(set(inc["new_classes"]) & set(range(inc["old_classes"])))
    if clash:
        errors.append(f"incremental.new_classes: {clash} overlap the old classes 0..{inc['old_classes'] - 1}")


@dataclass
class ExperimentFile:
    """A fully validated experiment: ``values`` mirrors the schema with defaults filled."""

    values: dict
    base_dir: Path = field(default=Path("."), compare=False)

    def __getitem__(self, key):
        return self.values[key]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def seed_for(self, stage: str) -> int:
        """Per-stage seed derived from the master seed."""
        return derive_seed(self.values["seed"], zlib.crc32(stage.encode()))

    def with_overrides(self, seed=None, out_dir=None) -> ExperimentFile:
        values = copy.deepcopy(self.values)
        if seed is not None:
            if not 0 <= seed <= U64_MAX:
                raise ConfigFileError([f"--seed: must be a u64, got {seed}"])
            values["seed"] = seed
        if out_dir is not None:
            values["out_dir"] = str(out_dir)
        return ExperimentFile(values, self.base_dir)

    def dumps(self) -> str:
        return yaml.safe_dump(self.values, sort_keys=True, default_flow_style=False)


def parse_mapping(raw, base_dir=".") -> ExperimentFile:
    errors: list = []
    values = _validate(raw if raw is not None else {}, SCHEMA, "", errors)
    _cross_checks(values, errors)
    if errors:
        raise ConfigFileError(errors)
    return ExperimentFile(values, Path(base_dir))


def parse_text(text: str, base_dir=".") -> ExperimentFile:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigFileError([f"<yaml>: syntax error at {where}: {getattr(exc, 'problem', exc)}"]) from None
    return parse_mapping(raw, base_dir)


def parse_experiment(path) -> ExperimentFile:
    path = Path(path)
    return parse_text(path.read_text(), path.parent)
