"""Pipeline stages behind each CLI subcommand."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

from team.cli.config import ExperimentFile
from team.cli.reporting import MetricsTable, emit_reports
from team.data import (
    Dataset,
    SyntheticSpec,
    generate_synthetic,
    imbalanced_plan,
    load_idx,
    load_mnist_5k,
    partition,
    stratified_split,
)
from team.decoupling import (
    ArchSpec,
    DecoupleConfig,
    DenseModel,
    TaskMode,
    checkpoint,
    decouple,
    param_accounting,
    split_for,
)
from team.engine.layers import spec_from_dict
from team.errors import ConfigError, InputError
from team.federation import (
    DeviceSpec,
    ExperimentConfig,
    Timeline,
    derive_seed,
    run_incremental,
    simulate,
    train_device,
)
from team.training import IncrementConfig, LocalTrainConfig, evaluate, train_dense

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    cloud: Dataset
    pool: Dataset
    test: Dataset
    dense: DenseModel
    global_model: object
    metrics: MetricsTable
    summary: dict


def load_dataset(cfg: ExperimentFile) -> Dataset:
    d = cfg["data"]
    if d["source"] == "synthetic":
        s = d["synthetic"]
        ds = generate_synthetic(SyntheticSpec(s["classes"], s["samples_per_class"], s["image_size"], s["noise_sigma"]),
                                cfg.seed_for("synthetic"))
    elif d["source"] == "idx":
        ds = load_idx(cfg.resolve(d["images"]), cfg.resolve(d["labels"]))
    else:
        ds = load_mnist_5k()
    if d["classes"] is not None:
        missing = sorted(set(d["classes"]) - set(ds.classes))
        if missing:
            raise InputError(f"data.classes: labels {missing} do not occur in the dataset")
        ds = ds.filter_classes(d["classes"])
    if ds.classes != list(range(len(ds.classes))):
        raise InputError(f"dataset labels must be 0..k-1, got {ds.classes}; restrict them with data.classes")
    return ds


def build_arch(cfg: ExperimentFile, class_count: int) -> ArchSpec:
    a = cfg["arch"]
    count = cfg["decouple"]["decoupled_layer_count"]
    if a["preset"] == "reference":
        ref = ArchSpec.reference(class_count)
        return ArchSpec(ref.input_shape, ref.layers, split_for(ref.layers, count), class_count)
    try:
        layers = [spec_from_dict(layer) for layer in a["layers"]]
    except ConfigError as exc:
        raise ConfigError(f"arch.layers: {exc}") from None
    if layers and getattr(layers[-1], "kind", "") == "affine" and layers[-1].out_dim != class_count:
        raise ConfigError(f"arch.layers: classifier out_dim {layers[-1].out_dim} != {class_count} data classes")
    arch = ArchSpec(tuple(a["input_shape"]), tuple(layers), a["split_index"], class_count)
    if len(arch.decoupled_convs) != count:
        raise ConfigError(f"arch.split_index: decouples {len(arch.decoupled_convs)} convs, "
                          f"decouple.decoupled_layer_count is {count}")
    return arch


def prepare(cfg: ExperimentFile, classes=None) -> Prepared:
    """Load, split, pretrain the dense model in the cloud and decouple it."""
    ds = load_dataset(cfg)
    split = cfg["data"]["split"]
    cloud, pool, test = stratified_split(ds, [split["cloud"], split["devices"], split["test"]], cfg.seed_for("split"))
    if classes is not None:
        cloud, pool, test = (part.filter_classes(classes) for part in (cloud, pool, test))
    class_count = len(cloud.classes)
    arch = build_arch(cfg, class_count)
    p = cfg["pretrain"]
    dense, report = train_dense(DenseModel.init(arch, cfg.seed_for("init")), cloud, p["epochs"], p["batch_size"],
                                p["lr"], cfg.seed_for("pretrain"))
    dc = cfg["decouple"]
    g = decouple(dense, DecoupleConfig(dc["decoupled_layer_count"], dc["path_fraction"], class_count,
                                       dc["calib_samples_per_class"]), cloud)
    metrics = MetricsTable()
    for e, loss in enumerate(report.epoch_losses):
        metrics.add("pretrain", e, "cloud", "loss", loss, "nats")
    dense_acc = evaluate(dense, test).accuracy
    global_acc = evaluate(g, test).accuracy
    metrics.add("pretrain", None, "global", "test_accuracy", dense_acc, "fraction")
    metrics.add("decouple", None, "global", "test_accuracy", global_acc, "fraction")
    dense_acct = param_accounting(dense)
    g_acct = param_accounting(g)
    path_size = g.paths[0].param_count
    for name, value in (("dense_params", dense_acct["param_count"]), ("shared_params", g_acct["shared"]["param_count"]),
                        ("path_params", path_size), ("global_params", g_acct["param_count"])):
        metrics.add("decouple", None, "global", name, value, "params")
    summary = {
        "class_count": class_count,
        "samples": {"cloud": len(cloud), "devices": len(pool), "test": len(test)},
        "dense_test_accuracy": dense_acc,
        "decoupled_test_accuracy": global_acc,
        "dense_params": dense_acct["param_count"],
        "shared_params": g_acct["shared"]["param_count"],
        "path_params": path_size,
        "global_params": g_acct["param_count"],
    }
    return Prepared(cloud, pool, test, dense, g, metrics, summary)


def build_devices(cfg: ExperimentFile, pool: Dataset, allowed, known=None) -> list[DeviceSpec]:
    """Device specs restricted to ``allowed`` classes, with imbalanced local partitions.

    ``known`` lists every label a device may name (defaults to ``allowed``);
    devices left with no allowed class sit the stage out.
    """
    if not cfg["devices"]:
        raise ConfigError("devices: at least one device is required for this subcommand")
    allowed = sorted(allowed)
    t = cfg["train"]
    train_cfg = LocalTrainConfig(t["epochs"], t["batch_size"], t["base_lr"], freeze_shared=t["freeze_shared"])
    picked, holdings = [], {}
    for i, d in enumerate(cfg["devices"]):
        classes = [c for c in d["classes"] if c in allowed]
        unknown = sorted(set(d["classes"]) - set(allowed if known is None else known))
        if unknown:
            raise ConfigError(f"devices[{i}].classes: labels {unknown} are not in the data")
        if not classes:
            continue
        mode = TaskMode(d["task_mode"]) if d["task_mode"] else None
        one_vs_all = mode is TaskMode.ONE_VS_ALL or (mode is None and len(classes) == 1)
        data_classes = d["data_classes"] or (allowed if one_vs_all else classes)
        holdings[d["id"]] = [c for c in data_classes if c in allowed]
        picked.append((d, tuple(classes), mode))
    if not picked:
        raise ConfigError("devices: no device holds any of the classes in play")
    plan = imbalanced_plan(holdings, cfg["partition"]["imbalance_factor"], cfg.seed_for("partition"))
    parts = partition(pool, plan, sorted(holdings))
    return [DeviceSpec(d["id"], classes, parts[d["id"]], train_cfg, mode, frozenset(d["fail_rounds"]))
            for d, classes, mode in picked]


def _threads(threads):
    return max(1, int(threads or 1))


def run_decouple(cfg: ExperimentFile, out: Path, threads: int = 1):
    prep = prepare(cfg)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(prep.dense, out / "dense.ckpt")
    checkpoint.save(prep.global_model, out / "global.ckpt")
    return emit_reports(out, stage="decouple", metrics=prep.metrics, summary=prep.summary)


def run_train_local(cfg: ExperimentFile, out: Path, threads: int = 1):
    prep = prepare(cfg)
    devices = build_devices(cfg, prep.pool, prep.cloud.classes)
    seed = cfg.seed_for("train-local")
    rows = {}
    out.mkdir(parents=True, exist_ok=True)
    for d in devices:
        d = replace(d, train_cfg=replace(d.train_cfg, seed=derive_seed(seed, d.device_id)))
        trained, updates, report, eval_acc = train_device(prep.global_model, 0, d, prep.test)
        m = prep.metrics
        for e, loss in enumerate(report.epoch_losses):
            m.add("train-local", e, d.device_id, "loss", loss, "nats")
        m.add("train-local", None, d.device_id, "accuracy", report.train_accuracy, "fraction")
        m.add("train-local", None, d.device_id, "eval_accuracy", eval_acc, "fraction")
        m.add("train-local", None, d.device_id, "steps", report.steps, "count")
        m.add("train-local", None, d.device_id, "bytes_up", sum(u.byte_size for u in updates), "bytes")
        checkpoint.save(trained, out / f"device{d.device_id}.ckpt")
        rows[str(d.device_id)] = {"classes": list(d.class_set), "task_mode": d.task_mode.value,
                                  "eval_accuracy": eval_acc, "train": report.to_dict()}
    return emit_reports(out, stage="train-local", metrics=prep.metrics, summary={**prep.summary, "devices": rows})


def run_federate(cfg: ExperimentFile, out: Path, threads: int = 1):
    prep = prepare(cfg)
    devices = build_devices(cfg, prep.pool, prep.cloud.classes)
    fed = cfg["federation"]
    seed = cfg.seed_for("federate")
    tl = simulate(ExperimentConfig(prep.global_model, devices, fed["rounds"], prep.test, seed,
                                   weighted=fed["weighted"], threads=_threads(threads)))
    baseline = None
    if fed["baseline"]:
        baseline = simulate(ExperimentConfig(prep.dense, devices, fed["rounds"], prep.test, seed,
                                             baseline_mode=True, threads=_threads(threads)))
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(tl.final_model, out / "global.ckpt")
    extra = {**prep.summary, "max_round0_device_accuracy": _best_device(tl, 0)}
    return emit_reports(out, tl, baseline, "federate", prep.metrics, extra)


def _best_device(tl: Timeline, t: int):
    accs = [d["eval_accuracy"] for d in tl.reports[t].devices if d["eval_accuracy"] is not None]
    return max(accs) if accs else None


def run_incremental_stage(cfg: ExperimentFile, out: Path, threads: int = 1):
    inc = cfg["incremental"]
    n = inc["old_classes"]
    old = list(range(n))
    full = load_dataset(cfg)
    missing = sorted(set(inc["new_classes"]) - set(full.classes))
    if missing:
        raise ConfigError(f"incremental.new_classes: labels {missing} do not occur in the data")
    if sorted(old + list(inc["new_classes"])) != full.classes:
        raise ConfigError(f"incremental: old classes 0..{n - 1} plus new classes {inc['new_classes']} "
                          f"must cover the data classes {full.classes}")
    prep = prepare(cfg, old)
    _, pool_all, test_all = stratified_split(full, [cfg["data"]["split"][k] for k in ("cloud", "devices", "test")],
                                             cfg.seed_for("split"))
    seed = cfg.seed_for("federate")
    g = prep.global_model
    old_tl = None
    metrics = prep.metrics
    if inc["old_rounds"]:
        old_devices = build_devices(cfg, prep.pool, old, full.classes)
        old_tl = simulate(ExperimentConfig(g, old_devices, inc["old_rounds"], prep.test, seed, threads=_threads(threads)))
        g = old_tl.final_model
        metrics.add_timeline("federate-old", old_tl)
    pre_old = evaluate(g, prep.test)
    devices = build_devices(cfg, pool_all, full.classes)
    inc_cfg = IncrementConfig(n, tuple(inc["new_classes"]), inc["new_path_lr_multiplier"], cfg.seed_for("increment"))
    tl, lr_map = run_incremental(g, devices, inc_cfg, inc["rounds"], test_all, derive_seed(seed, 1),
                                 threads=_threads(threads))
    final = tl.final_model
    post_all = evaluate(final, test_all)
    post_old = evaluate(final, prep.test)
    out.mkdir(parents=True, exist_ok=True)
    if old_tl is not None:
        old_tl.write(out / "old_timeline.jsonl")
    checkpoint.save(final, out / "global.ckpt")
    summary = {
        **prep.summary,
        "old_classes": old,
        "new_classes": list(inc_cfg.new_classes),
        "lr_multipliers": {str(k): v for k, v in sorted(lr_map.items())},
        "pre_increment_old_accuracy": pre_old.accuracy,
        "post_increment_old_accuracy": post_old.accuracy,
        "old_accuracy_drop": pre_old.accuracy - post_old.accuracy,
        "post_increment_accuracy": post_all.accuracy,
        "post_increment_per_class_accuracy": post_all.to_dict()["per_class_accuracy"],
    }
    return emit_reports(out, tl, None, "incremental", metrics, summary)


def run_report(cfg: ExperimentFile, out: Path, threads: int = 1):
    rep = cfg["report"]
    src = cfg.resolve(rep["timeline"]) if rep["timeline"] else out / "timeline.jsonl"
    if not src.exists():
        raise InputError(f"report.timeline: no timeline file at {src.name}")
    tl = Timeline.read(src)
    base_src = cfg.resolve(rep["baseline_timeline"]) if rep["baseline_timeline"] else out / "baseline_timeline.jsonl"
    baseline = Timeline.read(base_src) if base_src.exists() else None
    if rep["baseline_timeline"] and baseline is None:
        raise InputError(f"report.baseline_timeline: no file at {base_src.name}")
    return emit_reports(out, tl, baseline, "report")


STAGES = {
    "decouple": run_decouple,
    "train-local": run_train_local,
    "federate": run_federate,
    "incremental": run_incremental_stage,
    "report": run_report,
}

