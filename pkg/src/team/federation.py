"""In-process cloud/device simulation of critical-path federated rounds.

Every round: send each device its specialized model, train locally,
collect the trained paths, average corresponding paths, bump the version.
Transport is simulated; each transfer is metered in bytes from exact
parameter counts.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from team.data import Dataset
from team.decoupling.accounting import BYTES_PER_PARAM
from team.decoupling.arch import DenseModel
from team.decoupling.model import GlobalModel, TaskMode, extract_specialized
from team.errors import ConfigError, InputError, ProtocolError
from team.training import (
    IncrementConfig,
    LocalTrainConfig,
    PathUpdate,
    add_incremental_paths,
    evaluate,
    fine_tune,
    train_dense,
)

log = logging.getLogger(__name__)


def derive_seed(*parts) -> int:
    """Deterministic 63-bit seed from integers (no wall-clock entropy)."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class DeviceSpec:
    device_id: int
    class_set: tuple
    dataset: Dataset
    train_cfg: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    task_mode: TaskMode | None = None  # default: one-vs-all iff a single class
    fail_rounds: frozenset = frozenset()

    def __post_init__(self):
        self.class_set = tuple(sorted({int(c) for c in self.class_set}))
        if not self.class_set:
            raise ConfigError(f"device {self.device_id}: class_set must not be empty")
        if self.task_mode is None:
            self.task_mode = TaskMode.ONE_VS_ALL if len(self.class_set) == 1 else TaskMode.CLOSED_SET
        self.task_mode = TaskMode(self.task_mode)
        self.fail_rounds = frozenset(self.fail_rounds)


@dataclass
class RoundState:
    t: int
    model: GlobalModel | DenseModel

    def __post_init__(self):
        if isinstance(self.model, GlobalModel) and self.model.version != self.t:
            raise InputError(f"global model version {self.model.version} != round index {self.t}")


@dataclass
class RoundReport:
    t: int
    mode: str
    devices: list
    path_contributors: dict
    bytes_down: int
    bytes_up: int
    bytes_down_shared: int
    global_accuracy: float | None
    no_op: bool = False

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "mode": self.mode,
            "devices": self.devices,
            "path_contributors": {str(k): v for k, v in sorted(self.path_contributors.items())},
            "bytes_down": self.bytes_down,
            "bytes_up": self.bytes_up,
            "bytes_down_shared": self.bytes_down_shared,
            "global_accuracy": self.global_accuracy,
            "no_op": self.no_op,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RoundReport:
        d = dict(d)
        d["path_contributors"] = {int(k): v for k, v in d["path_contributors"].items()}
        return cls(**d)


def _check_devices(devices):
    ids = [d.device_id for d in devices]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"device ids must be unique, got {ids}")
    return sorted(devices, key=lambda d: d.device_id)


def aggregate_path(updates, weighted: bool = False) -> np.ndarray:
    """Elementwise mean of flattened path parameters.

    Accumulates in float64 in ascending ``device_id`` order so the result is
    bitwise independent of the order updates arrive in.
    """
    if not updates:
        raise ProtocolError("no updates to aggregate")
    ups = sorted(updates, key=lambda u: u.device_id)
    ids = [u.device_id for u in ups]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate updates from devices {ids}")
    sizes = {u.device_id: int(u.params.size) for u in ups}
    if len(set(sizes.values())) != 1:
        raise ProtocolError(f"update lengths differ across devices: {sizes}")
    if weighted:
        weights = [float(u.sample_count) for u in ups]
        if sum(weights) <= 0:
            raise ProtocolError(f"weighted aggregation with zero total samples from devices {ids}")
    else:
        weights = [1.0] * len(ups)
    acc = np.zeros(ups[0].params.size, np.float64)
    for w, u in zip(weights, ups):
        acc += w * np.asarray(u.params, np.float64)
    return (acc / sum(weights)).astype(np.float32)


def _round_cfg(cfg: LocalTrainConfig, t: int) -> LocalTrainConfig:
    return replace(cfg, seed=derive_seed(cfg.seed, t))


def train_device(global_model: GlobalModel, t: int, device: DeviceSpec, eval_set: Dataset | None = None):
    """Device side of round ``t``: extract, fine-tune, optionally evaluate locally.

    Returns ``(trained_model, path_updates, train_report, local_eval_accuracy)``.
    """
    spec = extract_specialized(global_model, device.class_set, device.task_mode)
    trained, updates, report = fine_tune(spec, device.dataset, _round_cfg(device.train_cfg, t), device.device_id)
    eval_acc = None
    if eval_set is not None:
        local_eval = eval_set if device.task_mode is TaskMode.ONE_VS_ALL else _restrict(eval_set, device.class_set)
        if local_eval is not None:
            eval_acc = evaluate(trained, local_eval).accuracy
    return trained, updates, report, eval_acc


def _map_devices(fn, devices, threads):
    if threads > 1 and len(devices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, devices))
    return [fn(d) for d in devices]


def _restrict(eval_set, labels):
    if eval_set is None:
        return None
    sub = np.flatnonzero(np.isin(eval_set.labels, list(labels)))
    return eval_set.subset(sub) if sub.size else None


def run_round(state: RoundState, devices, eval_set: Dataset | None = None, weighted: bool = False,
              threads: int = 1):
    """One distribute / train / collect / average cycle; returns ``(next_state, report)``."""
    devices = _check_devices(devices)
    g = state.model
    known = set(g.labels)
    for d in devices:
        missing = sorted(set(d.class_set) - known)
        if missing:
            raise InputError(f"device {d.device_id}: classes {missing} have no critical path")
    shared_params = sum(b.size for b in g.shared)
    path_params = {p.class_label: p.param_count for p in g.paths}

    active = [d for d in devices if state.t not in d.fail_rounds]
    results = dict(zip([d.device_id for d in active],
                       _map_devices(lambda d: train_device(state.model, state.t, d, eval_set)[1:], active, threads)))

    rows, collected = [], {}
    bytes_down = bytes_up = bytes_shared = 0
    for d in devices:
        down_shared = BYTES_PER_PARAM * shared_params if state.t == 0 else 0
        down = down_shared + BYTES_PER_PARAM * sum(path_params[c] for c in d.class_set)
        bytes_down += down
        bytes_shared += down_shared
        row = {"device_id": d.device_id, "classes": list(d.class_set), "task_mode": d.task_mode.value,
               "bytes_down": down}
        if d.device_id not in results:
            row.update(status="failed", bytes_up=0, loss=None, accuracy=None, eval_accuracy=None, steps=0)
            log.info("round %d: device %d failed, excluded from aggregation", state.t, d.device_id)
        else:
            updates, report, eval_acc = results[d.device_id]
            up = sum(u.byte_size for u in updates)
            bytes_up += up
            for u in updates:
                collected.setdefault(u.path_id, []).append(u)
            row.update(status="ok", bytes_up=up, loss=report.final_loss, accuracy=report.train_accuracy,
                       eval_accuracy=eval_acc, steps=report.steps)
        rows.append(row)

    new = g.copy()
    by_id = {p.path_id: p for p in new.paths}
    for pid, ups in sorted(collected.items()):
        by_id[pid].load_flat(aggregate_path(ups, weighted))
    new.version = state.t + 1
    eval_sub = _restrict(eval_set, new.labels)
    acc = evaluate(new, eval_sub).accuracy if eval_sub is not None else None
    report = RoundReport(state.t, "team", rows, {pid: len(u) for pid, u in collected.items()},
                         bytes_down, bytes_up, bytes_shared, acc, no_op=not collected)
    return RoundState(state.t + 1, new), report


def _train_dense_device(state, device, eval_set):
    cfg = _round_cfg(device.train_cfg, state.t)
    trained, report = train_dense(state.model, device.dataset, cfg.epochs, cfg.batch_size, cfg.base_lr, cfg.seed)
    flat = np.concatenate([b.value.ravel() for b in trained.blocks])
    update = PathUpdate(device.device_id, -1, flat, len(device.dataset))
    eval_acc = None
    if eval_set is not None:
        local_eval = _restrict(eval_set, device.class_set)
        if local_eval is not None:
            eval_acc = evaluate(trained, local_eval).accuracy
    return update, report, eval_acc


def run_fedavg_round(state: RoundState, devices, eval_set: Dataset | None = None, threads: int = 1):
    """Baseline round: full dense model down and up, sample-weighted averaging."""
    devices = _check_devices(devices)
    model = state.model
    full = BYTES_PER_PARAM * sum(b.size for b in model.blocks)
    active = [d for d in devices if state.t not in d.fail_rounds]
    results = dict(zip([d.device_id for d in active],
                       _map_devices(lambda d: _train_dense_device(state, d, eval_set), active, threads)))
    rows, updates = [], []
    for d in devices:
        row = {"device_id": d.device_id, "classes": list(d.class_set), "task_mode": "dense", "bytes_down": full}
        if d.device_id in results:
            update, report, eval_acc = results[d.device_id]
            updates.append(update)
            row.update(status="ok", bytes_up=full, loss=report.final_loss, accuracy=report.train_accuracy,
                       eval_accuracy=eval_acc, steps=report.steps)
        else:
            row.update(status="failed", bytes_up=0, loss=None, accuracy=None, eval_accuracy=None, steps=0)
        rows.append(row)
    new = model.copy()
    if updates:
        flat = aggregate_path(updates, weighted=True)
        offset = 0
        for b in new.blocks:
            b.value = flat[offset:offset + b.size].reshape(b.value.shape).copy()
            offset += b.size
    acc = evaluate(new, eval_set).accuracy if eval_set is not None else None
    report = RoundReport(state.t, "fedavg", rows, {-1: len(updates)} if updates else {},
                         len(devices) * full, len(updates) * full, 0, acc, no_op=not updates)
    return RoundState(state.t + 1, new), report


@dataclass
class ExperimentConfig:
    """Everything one simulated federation needs.

    ``initial_model`` is the decoupled global model, or the dense model when
    ``baseline_mode`` runs full-model FedAvg instead.
    """

    initial_model: GlobalModel | DenseModel
    devices: list
    rounds: int
    eval_set: Dataset | None = None
    seed: int = 0
    baseline_mode: bool = False
    weighted: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        _check_devices(self.devices)
        if self.baseline_mode != isinstance(self.initial_model, DenseModel):
            raise ConfigError("baseline_mode requires a dense initial model (and only then)")


@dataclass
class Timeline:
    reports: list
    final_model: object = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.reports)

    def write(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read(cls, path) -> Timeline:
        with open(path) as fh:
            return cls([RoundReport.from_dict(json.loads(line)) for line in fh if line.strip()])


def seeded_devices(devices, master_seed: int):
    """Copies of ``devices`` whose training seeds derive from the master seed."""
    return [replace(d, train_cfg=replace(d.train_cfg, seed=derive_seed(master_seed, d.device_id)))
            for d in devices]


def simulate(cfg: ExperimentConfig, state: RoundState | None = None) -> Timeline:
    """Run ``cfg.rounds`` rounds, evaluating the aggregated model after each."""
    devices = seeded_devices(cfg.devices, cfg.seed)
    state = state or RoundState(getattr(cfg.initial_model, "version", 0), cfg.initial_model)
    reports = []
    for _ in range(cfg.rounds):
        try:
            if cfg.baseline_mode:
                state, report = run_fedavg_round(state, devices, cfg.eval_set, cfg.threads)
            else:
                state, report = run_round(state, devices, cfg.eval_set, cfg.weighted, cfg.threads)
        except Exception as exc:
            if hasattr(exc, "add_note"):
                exc.add_note(f"while running round {state.t}")
            else:
                exc.args = (f"round {state.t}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            raise
        log.info("round %d: global accuracy %s, up %d B, down %d B",
                 report.t, report.global_accuracy, report.bytes_up, report.bytes_down)
        reports.append(report)
    return Timeline(reports, state.model)


def run_incremental(global_model: GlobalModel, devices, inc: IncrementConfig, rounds: int,
                    eval_set: Dataset | None = None, seed: int = 0, weighted: bool = False, threads: int = 1):
    """Add new-class paths, then federate with boosted learning rates on the new paths."""
    grown, lr_map = add_incremental_paths(global_model, inc)
    boosted = [replace(d, train_cfg=replace(d.train_cfg, lr_multipliers={**d.train_cfg.lr_multipliers, **lr_map}))
               for d in devices]
    cfg = ExperimentConfig(grown, boosted, rounds, eval_set, seed, weighted=weighted, threads=threads)
    return simulate(cfg), lr_map


@dataclass
class TrafficReport:
    per_round: list
    uplink_ratio: float
    downlink_ratio: float
    team_bytes_up: int
    team_bytes_down: int
    fedavg_bytes_up: int
    fedavg_bytes_down: int

    def to_dict(self) -> dict:
        return {
            "per_round": self.per_round,
            "uplink_ratio": self.uplink_ratio,
            "downlink_ratio": self.downlink_ratio,
            "team_bytes_up": self.team_bytes_up,
            "team_bytes_down": self.team_bytes_down,
            "fedavg_bytes_up": self.fedavg_bytes_up,
            "fedavg_bytes_down": self.fedavg_bytes_down,
        }


def _ratio(a: int, b: int):
    return float(Fraction(a, b)) if b else None


def traffic_compare(timeline: Timeline, baseline: Timeline) -> TrafficReport:
    """Exact per-round and cumulative byte ratios, critical paths over full-model FedAvg."""
    if len(timeline.reports) != len(baseline.reports):
        raise InputError(f"timelines cover {len(timeline.reports)} vs {len(baseline.reports)} rounds")
    rows = []
    for a, b in zip(timeline.reports, baseline.reports):
        rows.append({"t": a.t, "uplink_ratio": _ratio(a.bytes_up, b.bytes_up),
                     "downlink_ratio": _ratio(a.bytes_down, b.bytes_down),
                     "team_bytes_up": a.bytes_up, "fedavg_bytes_up": b.bytes_up,
                     "team_bytes_down": a.bytes_down, "fedavg_bytes_down": b.bytes_down})
    tu = sum(r.bytes_up for r in timeline.reports)
    td = sum(r.bytes_down for r in timeline.reports)
    fu = sum(r.bytes_up for r in baseline.reports)
    fd = sum(r.bytes_down for r in baseline.reports)
    return TrafficReport(rows, _ratio(tu, fu), _ratio(td, fd), tu, td, fu, fd)
