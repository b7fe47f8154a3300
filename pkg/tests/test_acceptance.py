"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a one-line PASS/FAIL verdict (see acceptance_log) before
asserting, so the terminal summary lists every criterion even on failure.
Thresholds marked "frozen" were measured once on the shipped seeded configs.
"""
import hashlib
import json
import math
import shutil
import time
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from acceptance_log import record
from conftest import randomize_biases, small_arch
from oracles import grouped_pack_logits, naive_global_logits, walk_param_count

from team.cli.config import parse_experiment, parse_mapping
from team.cli.main import main
from team.cli.stages import (
    build_devices,
    prepare,
    run_federate,
    run_incremental_stage,
    run_train_local,
)
from team.data import Dataset, export_mnist_5k
from team.decoupling import (
    ArchSpec,
    DecoupleConfig,
    DenseModel,
    TaskMode,
    checkpoint,
    decouple,
    extract_specialized,
)
from team.engine import (
    Affine,
    AffineLayer,
    Conv,
    Conv2D,
    FlattenLayer,
    MaxPool,
    MaxPool2D,
    ParamBlock,
    ReLULayer,
    finite_diff_check,
)
from team.engine.gradcheck import bce_loss, softmax_loss
from team.federation import (
    ExperimentConfig,
    PathUpdate,
    aggregate_path,
    simulate,
    traffic_compare,
)
from team.training import LocalTrainConfig, fine_tune

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

# frozen from the development run of configs/mnist_federate.yaml (seed 2024)
FEDERATE_FINAL_ACCURACY = 0.96
# allowance for float reassociation across BLAS builds, not for regressions
DRIFT = 0.01


def shared_digest(model):
    return hashlib.sha256(b"".join(b.value.tobytes() for b in model.shared)).hexdigest()


@pytest.fixture(scope="module")
def federate_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("federate")
    cfg = parse_experiment(CONFIGS / "mnist_federate.yaml")
    run_federate(cfg, out)
    return cfg, out, json.loads((out / "summary.json").read_text()), prepare(cfg)


# 1

def test_gradient_correctness():
    rng = np.random.default_rng(101)
    start = time.process_time()
    worst = {}

    def note(kind, err):
        worst[kind] = max(worst.get(kind, 0.0), err)

    for _ in range(20):
        groups = int(rng.choice([1, 2]))
        c, f = groups * int(rng.integers(1, 4)), groups * int(rng.integers(1, 3))
        k, s, p = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.standard_normal((2, c, int(rng.integers(k, 8)), int(rng.integers(k, 8)))).astype(np.float32)
        w = rng.standard_normal((f, c // groups, k, k)).astype(np.float32)
        layer = Conv2D(Conv(f, c, k, s, p, groups), ParamBlock(w, name="w"),
                       ParamBlock(rng.standard_normal(f).astype(np.float32), name="b"))
        note("conv", finite_diff_check([layer], x))

        k = int(rng.integers(1, 4))
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(k, 8)), int(rng.integers(k, 8)))
        # a coarse permutation grid keeps every window away from a tie
        xp = (rng.permutation(math.prod(shape)) * 0.1).reshape(shape).astype(np.float32)
        note("maxpool", finite_diff_check([MaxPool2D(MaxPool(k, int(rng.integers(1, 3))))], xp))

        xr = rng.standard_normal(tuple(int(v) for v in rng.integers(1, 5, size=4))).astype(np.float32)
        xr[np.abs(xr) < 0.05] += 0.1
        note("relu", finite_diff_check([ReLULayer()], xr))
        note("flatten", finite_diff_check([FlattenLayer()], xr))

        n, i, o = (int(v) for v in rng.integers(1, 7, size=3))
        fc = AffineLayer.init(Affine(i, o), rng, "fc")
        fc.bias.value[:] = rng.standard_normal(o)
        xa = rng.standard_normal((n, i)).astype(np.float32)
        note("affine", finite_diff_check([fc], xa))
        if o > 1:
            note("softmax_ce", finite_diff_check([fc], xa, loss=softmax_loss(rng.integers(0, o, n))))
        head = AffineLayer.init(Affine(i, 1), rng, "head")
        note("sigmoid_bce", finite_diff_check([head], xa, loss=bce_loss(rng.integers(0, 2, n))))
    elapsed = time.process_time() - start
    ok = all(v <= 1e-3 for v in worst.values()) and elapsed < 60 and len(worst) == 7
    record(1, ok, f"worst rel err {max(worst.values()):.2e} over 7 kinds x20, {elapsed:.1f}s cpu")
    assert ok, (worst, elapsed)


# 2

def test_oracle_equivalence():
    rng = np.random.default_rng(202)
    worst_naive = worst_pack = 0.0
    isolated = True
    for i in range(100):
        classes = int(rng.integers(1, 6))
        model = DenseModel.init(small_arch(classes), seed=int(rng.integers(2**31)))
        randomize_biases(model, rng)
        calib = Dataset(rng.random((2 * classes, 1, 12, 12)), np.repeat(np.arange(classes), 2))
        g = decouple(model, DecoupleConfig(2, float(rng.choice([0.125, 0.25, 0.5, 1.0])), classes), calib)
        x = rng.random((2, 1, 12, 12)).astype(np.float32)
        got = g.logits(x)
        worst_naive = max(worst_naive, float(np.max(np.abs(got - naive_global_logits(g, x)))))
        worst_pack = max(worst_pack, float(np.max(np.abs(got - grouped_pack_logits(g, x)))))
        if classes > 1 and i % 5 == 0:
            victim = int(rng.integers(classes))
            h = g.copy()
            for b in h.paths[victim].blocks:
                b.value = b.value + rng.standard_normal(b.value.shape).astype(np.float32)
            others = [j for j in range(classes) if j != victim]
            isolated &= np.array_equal(h.logits(x)[:, others], got[:, others])
    ok = worst_naive <= 1e-6 and worst_pack <= 1e-6 and isolated
    record(2, ok, f"max |diff| naive {worst_naive:.1e}, grouped {worst_pack:.1e}, isolation bitwise {isolated}")
    assert ok


# 3

def test_slicing_consistency():
    rng = np.random.default_rng(303)
    worst = {}
    for classes in (1, 10):
        model = DenseModel.init(ArchSpec.reference(classes), seed=31 + classes)
        randomize_biases(model, rng)
        calib = Dataset(rng.random((2 * classes, 1, 28, 28)), np.repeat(np.arange(classes), 2))
        g = decouple(model, DecoupleConfig(2, 1.0, classes), calib)
        x = rng.random((100, 1, 28, 28)).astype(np.float32)
        worst[classes] = float(np.max(np.abs(g.logits(x) - model.logits(x))))
    ok = max(worst.values()) <= 1e-5
    record(3, ok, f"p=1.0 max |logit diff| single-class {worst[1]:.1e}, 10-class {worst[10]:.1e}")
    assert ok


# 4

def test_freeze_invariant(trained_global10, separable10, federate_run):
    before = shared_digest(trained_global10)
    same = True
    for seed, (labels, epochs, lr) in enumerate([((0,), 2, 0.3), ((1, 4, 7), 1, 0.1), (tuple(range(10)), 2, 0.05)]):
        mode = TaskMode.ONE_VS_ALL if len(labels) == 1 else TaskMode.CLOSED_SET
        spec = extract_specialized(trained_global10, labels, mode)
        data = separable10 if len(labels) == 1 else separable10.filter_classes(labels)
        trained, _, _ = fine_tune(spec, data, LocalTrainConfig(epochs, 8, lr, seed=seed))
        same &= shared_digest(trained) == before
    _, out, _, prep = federate_run
    initial = prep.global_model
    final = checkpoint.load(out / "global.ckpt")
    rounds_ok = shared_digest(final) == shared_digest(initial) and final.version == 10
    ok = same and rounds_ok
    record(4, ok, f"shared sha256 unchanged: fine_tune x3 {same}, 10 federated rounds {rounds_ok}")
    assert ok


# 5

def test_aggregation_exactness():
    rng = np.random.default_rng(505)
    length = 793  # one reference-config path
    worst = 0.0
    permuted_ok = True
    for trial in range(20):
        k = int(rng.integers(2, 12))
        vecs = [(rng.standard_normal(length) * 0.3).astype(np.float32) for _ in range(k)]
        ups = [PathUpdate(i, 0, v, 10) for i, v in enumerate(vecs)]
        oracle = np.array([math.fsum(float(v[j]) for v in vecs) / k for j in range(length)])
        got = aggregate_path(ups)
        worst = max(worst, float(np.max(np.abs(got.astype(np.float64) - oracle))))
        for s in range(3):
            perm = np.random.default_rng(trial * 10 + s).permutation(k)
            permuted_ok &= aggregate_path([ups[i] for i in perm]).tobytes() == got.tobytes()
    ok = worst <= 1e-7 and permuted_ok
    record(5, ok, f"max |mean - fsum oracle| {worst:.1e}, permutation bitwise {permuted_ok}")
    assert ok


# 6

@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    return export_mnist_5k(tmp_path_factory.mktemp("mnist"))


def test_one_vs_all_digit_zero(mnist_idx, tmp_path):
    images, labels = mnist_idx
    cfg = parse_mapping({
        "seed": 11,
        "data": {"source": "idx", "images": str(images), "labels": str(labels),
                 "split": {"cloud": 0.2, "devices": 0.6, "test": 0.2}},
        "pretrain": {"epochs": 2},
        "train": {"epochs": 3},
        "devices": [{"id": 0, "classes": [0], "task_mode": "one_vs_all"}],
    })
    start = time.process_time()
    run_train_local(cfg, tmp_path)
    elapsed = time.process_time() - start
    row = json.loads((tmp_path / "summary.json").read_text())["devices"]["0"]
    acc = row["eval_accuracy"]
    ok = row["task_mode"] == "one_vs_all" and row["train"]["epochs"] == 3 and acc >= 0.95 and elapsed < 300
    record(6, ok, f"digit-0 vs rest held-out accuracy {acc:.4f} after 3 epochs, {elapsed:.1f}s cpu")
    assert ok


# 7

def test_federated_improvement(federate_run):
    _, _, summary, _ = federate_run
    final = summary["final_global_accuracy"]
    best_first = summary["max_round0_device_accuracy"]
    ok = final >= best_first and final >= FEDERATE_FINAL_ACCURACY - DRIFT
    record(7, ok, f"final {final:.4f} vs best first-round device {best_first:.4f}, "
                  f"frozen {FEDERATE_FINAL_ACCURACY} (-{DRIFT}); fedavg final {summary['baseline_final_accuracy']:.4f}")
    assert ok


# 8

def _byte_counters(tl):
    keys = ("bytes_up", "bytes_down", "bytes_down_shared")
    return [([getattr(r, k) for k in keys], [(d["bytes_up"], d["bytes_down"]) for d in r.devices]) for r in tl.reports]


def test_traffic_claim(federate_run):
    from team.federation import Timeline
    cfg, out, summary, prep = federate_run
    team = Timeline.read(out / "timeline.jsonl")
    fedavg = Timeline.read(out / "baseline_timeline.jsonl")
    devices = cfg["devices"]
    team_params = sum(walk_param_count(prep.global_model.path(c)) for d in devices for c in d["classes"])
    full_params = len(devices) * walk_param_count(prep.dense.blocks)
    expected = float(Fraction(team_params, full_params))
    rep = traffic_compare(team, fedavg)
    exact = all(row["uplink_ratio"] == expected for row in rep.per_round) and summary["uplink_ratio"] == expected

    # reference arch, one device holding one path, on synthetic data
    quick = parse_experiment(CONFIGS / "synthetic_quick.yaml")
    qp = prepare(quick)
    one = [d for d in build_devices(quick, qp.pool, qp.cloud.classes) if len(d.class_set) == 1]
    single = traffic_compare(simulate(ExperimentConfig(qp.global_model, one, 1)),
                             simulate(ExperimentConfig(qp.dense, one, 1, baseline_mode=True)))
    path_p, dense_p = walk_param_count(qp.global_model.path(one[0].class_set[0])), walk_param_count(qp.dense.blocks)
    single_ok = single.uplink_ratio == float(Fraction(path_p, dense_p)) and path_p == 793

    devs = build_devices(quick, qp.pool, qp.cloud.classes)
    doubled = [replace(d, train_cfg=replace(d.train_cfg, epochs=2 * d.train_cfg.epochs)) for d in devs]
    same = True
    for model, base in ((qp.global_model, False), (qp.dense, True)):
        runs = [simulate(ExperimentConfig(model, ds, 2, baseline_mode=base)) for ds in (devs, doubled)]
        same &= _byte_counters(runs[0]) == _byte_counters(runs[1])
    ok = exact and expected < 0.5 and single_ok and same
    record(8, ok, f"uplink ratio {rep.uplink_ratio!r} == {team_params}/{full_params} exact {exact}; "
                  f"single path {path_p}/{dense_p} {single_ok}; doubled E same bytes {same}")
    assert ok


# 9

def test_incremental_learning(tmp_path):
    cfg = parse_experiment(CONFIGS / "mnist_incremental.yaml")
    run_incremental_stage(cfg, tmp_path / "inc")
    run_federate(cfg, tmp_path / "scratch")
    inc = json.loads((tmp_path / "inc" / "summary.json").read_text())
    oracle = json.loads((tmp_path / "scratch" / "summary.json").read_text())["final_global_accuracy"]
    acc, drop = inc["post_increment_accuracy"], inc["old_accuracy_drop"]
    boosted = {k for k, v in inc["lr_multipliers"].items() if v == 10.0}
    ok = abs(acc - oracle) <= 0.05 and drop <= 0.05 and boosted == {"5", "6"}
    record(9, ok, f"7-class {acc:.4f} vs from-scratch {oracle:.4f}; old-class drop {drop:+.4f}")
    assert ok


# 10

def _digest(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


def test_end_to_end_determinism(tmp_path):
    cfg = str(CONFIGS / "synthetic_quick.yaml")
    verdicts = {}
    for command in ("decouple", "train-local", "federate", "incremental"):
        runs = []
        for tag in "ab":
            out = tmp_path / f"{command}-{tag}"
            assert main([command, "--config", cfg, "--out", str(out)]) == 0
            runs.append(_digest(out))
        verdicts[command] = runs[0] == runs[1] and len(runs[0]) >= 2
    reports = []
    for tag in "ab":
        out = tmp_path / f"report-{tag}"
        shutil.copytree(tmp_path / "federate-a", out)
        assert main(["report", "--config", cfg, "--out", str(out)]) == 0
        reports.append(_digest(out))
    verdicts["report"] = reports[0] == reports[1]
    ok = all(verdicts.values())
    record(10, ok, "sha256-identical reruns: " + ", ".join(f"{k} {v}" for k, v in verdicts.items()))
    assert ok
