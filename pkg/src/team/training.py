"""Device-side learning: path fine-tuning, evaluation, dense training and path addition."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from team.data import Dataset
from team.decoupling.arch import DenseModel, check_batch, wrap_shared
from team.decoupling.model import (
    CHUNK,
    CriticalPath,
    SpecializedModel,
    TaskMode,
    path_specs,
)
from team.engine import ops
from team.engine.layers import build_layer
from team.engine.params import sgd_step
from team.errors import ConfigError, InputError


@dataclass
class LocalTrainConfig:
    epochs: int = 1
    batch_size: int = 32
    base_lr: float = 0.05
    lr_multipliers: dict = field(default_factory=dict)  # path_id -> multiplier
    freeze_shared: bool = True
    seed: int = 0
    frozen_paths: tuple = ()  # path ids held fixed while the rest train

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr >= 0:
            raise ConfigError(f"base_lr must be >= 0, got {self.base_lr}")
        for pid, mult in self.lr_multipliers.items():
            if not mult > 0:
                raise ConfigError(f"lr multiplier for path {pid} must be > 0, got {mult}")

    def path_lr(self, path_id) -> float:
        return self.base_lr * self.lr_multipliers.get(path_id, 1.0)


@dataclass
class PathUpdate:
    """A device's locally trained copy of one critical path."""

    device_id: int
    path_id: int
    params: np.ndarray
    sample_count: int

    @property
    def byte_size(self) -> int:
        return 4 * int(self.params.size)


@dataclass
class TrainReport:
    epochs: int
    steps: int
    samples_seen: int
    epoch_losses: list
    train_accuracy: float

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]

    def to_dict(self) -> dict:
        return {**asdict(self), "final_loss": self.final_loss}


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: dict
    per_class_count: dict
    count: int
    mean_loss: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "count": self.count,
            "mean_loss": self.mean_loss,
            "per_class_accuracy": {str(k): v for k, v in sorted(self.per_class_accuracy.items())},
            "per_class_count": {str(k): v for k, v in sorted(self.per_class_count.items())},
        }


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch)])


def _targets(model: SpecializedModel, labels):
    if model.task_mode is TaskMode.ONE_VS_ALL:
        return (labels == model.labels[0]).astype(np.int64)
    position = {c: i for i, c in enumerate(model.labels)}
    bad = sorted(set(np.unique(labels).tolist()) - set(position))
    if bad:
        raise InputError(f"labels {bad} are not among the model's classes {model.labels}")
    return np.array([position[int(c)] for c in labels], np.int64)


def _loss(model, logits, targets):
    if model.task_mode is TaskMode.ONE_VS_ALL:
        loss, grad = ops.sigmoid_bce(logits[:, 0], targets)
        return loss, grad[:, None], (logits[:, 0] >= 0).astype(np.int64)
    loss, grad = ops.softmax_cross_entropy(logits, targets)
    return loss, grad, logits.argmax(axis=1)


def _epoch_order(model, targets, rng):
    if model.task_mode is TaskMode.ONE_VS_ALL:
        pos = np.flatnonzero(targets == 1)
        neg = np.flatnonzero(targets == 0)
        # balanced 1:1 negatives, redrawn every epoch
        take = min(len(neg), max(len(pos), 1))
        picked = np.sort(rng.choice(neg, size=take, replace=False)) if take else neg[:0]
        idx = np.concatenate([pos, picked])
        return idx[rng.permutation(len(idx))]
    return rng.permutation(len(targets))


def fine_tune(model: SpecializedModel, dataset: Dataset, cfg: LocalTrainConfig, device_id: int = 0):
    """Mini-batch SGD over the model's critical paths.

    Works on a copy; returns ``(updated_model, path_updates, report)``.
    With ``freeze_shared`` the shared features are computed once up front.
    """
    if dataset is None or len(dataset) == 0:
        raise InputError("cannot fine-tune on an empty dataset")
    model = model.copy()
    arch = model.arch
    x = check_batch(arch, dataset.images)
    targets = _targets(model, dataset.labels)
    for b in model.shared:
        b.trainable = not cfg.freeze_shared
    frozen_paths = set(cfg.frozen_paths)
    for p in model.paths:
        for b in p.blocks:
            b.trainable = p.path_id not in frozen_paths

    shared = wrap_shared(arch, model.shared)
    nets = [p.network(arch) for p in model.paths]
    if cfg.freeze_shared:
        feats = np.concatenate([shared.forward(x[i:i + CHUNK]) for i in range(0, len(x), CHUNK)])
        for net in nets:
            net.layers[0].need_input_grad = False

    steps = seen = 0
    epoch_losses = []
    correct = counted = 0
    for epoch in range(cfg.epochs):
        order = _epoch_order(model, targets, epoch_rng(cfg.seed, epoch))
        total, correct, counted = 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            h = feats[idx] if cfg.freeze_shared else shared.forward(x[idx])
            logits = np.concatenate([net.forward(h) for net in nets], axis=1)
            loss, d_logits, pred = _loss(model, logits, targets[idx])
            d_logits = d_logits.astype(np.float32)
            d_shared = None
            for j, net in enumerate(nets):
                dh = net.backward(np.ascontiguousarray(d_logits[:, j:j + 1]))
                if not cfg.freeze_shared:
                    d_shared = dh if d_shared is None else d_shared + dh
            if not cfg.freeze_shared:
                shared.backward(d_shared)
                sgd_step(model.shared, cfg.base_lr)
            for p in model.paths:
                sgd_step(p.blocks, cfg.path_lr(p.path_id))
            total += loss * len(idx)
            correct += int(np.sum(pred == targets[idx]))
            counted += len(idx)
            steps += 1
        seen += counted
        epoch_losses.append(total / max(counted, 1))

    for b in model.shared:
        b.trainable = False
    labels = dataset.labels
    updates = []
    for p in model.paths:
        n = int(np.sum(labels == p.class_label))
        updates.append(PathUpdate(device_id, p.path_id, p.flat(), n))
    report = TrainReport(cfg.epochs, steps, seen, epoch_losses, correct / max(counted, 1))
    return model, updates, report


def predict(model, x) -> np.ndarray:
    """Class label predictions (one-vs-all: 1 for the path's class, else 0)."""
    if isinstance(model, DenseModel):
        return model.logits(x).argmax(axis=1)
    logits = model.logits(x)
    if isinstance(model, SpecializedModel) and model.task_mode is TaskMode.ONE_VS_ALL:
        return (logits[:, 0] >= 0).astype(np.int64)
    # argmax ties resolve to the first column, i.e. the lowest class label
    return np.asarray(model.labels)[logits.argmax(axis=1)]


def evaluate(model, dataset: Dataset) -> EvalReport:
    """Accuracy, per-class accuracy and mean loss on ``dataset``.

    One-vs-all models count a sample correct when ``sigmoid(logit) >= 0.5``
    agrees with whether it belongs to the path's class.
    """
    if dataset is None or len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    labels = dataset.labels
    if isinstance(model, DenseModel):
        if labels.max() >= model.arch.class_count:
            raise InputError(f"label {labels.max()} outside the dense model's {model.arch.class_count} classes")
        logits = model.logits(dataset.images)
        mean_loss, _ = ops.softmax_cross_entropy(logits.astype(np.float64), labels)
        correct = logits.argmax(axis=1) == labels
    else:
        spec = model if isinstance(model, SpecializedModel) else SpecializedModel(
            model.arch, model.shared, model.paths, TaskMode.CLOSED_SET if len(model.paths) > 1 else TaskMode.ONE_VS_ALL)
        logits = spec.logits(dataset.images)
        targets = _targets(spec, labels)
        mean_loss, _, pred = _loss(spec, logits.astype(np.float64), targets)
        correct = pred == targets
    per_acc, per_count = {}, {}
    for c in np.unique(labels):
        mask = labels == c
        per_count[int(c)] = int(mask.sum())
        per_acc[int(c)] = float(correct[mask].mean())
    return EvalReport(float(correct.mean()), per_acc, per_count, len(labels), float(mean_loss))


def train_dense(model: DenseModel, dataset: Dataset, epochs: int, batch_size: int, lr: float, seed: int):
    """Plain softmax SGD over every layer of a dense model (works on a copy)."""
    if not lr >= 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    if epochs < 1 or batch_size < 1:
        raise ConfigError("epochs and batch_size must be >= 1")
    model = model.copy()
    for b in model.blocks:
        b.trainable = True
    x = check_batch(model.arch, dataset.images)
    y = dataset.labels
    if y.max() >= model.arch.class_count:
        raise InputError(f"label {y.max()} outside the dense model's {model.arch.class_count} classes")
    model.net.layers[0].need_input_grad = False
    steps = 0
    losses = []
    correct = counted = 0
    for epoch in range(epochs):
        order = epoch_rng(seed, epoch).permutation(len(y))
        total, correct, counted = 0.0, 0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            logits = model.net.forward(x[idx])
            loss, grad = ops.softmax_cross_entropy(logits, y[idx])
            model.net.backward(grad.astype(np.float32))
            sgd_step(model.blocks, lr)
            total += loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == y[idx]))
            counted += len(idx)
            steps += 1
        losses.append(total / counted)
    return model, TrainReport(epochs, steps, epochs * len(y), losses, correct / counted)


@dataclass(frozen=True)
class IncrementConfig:
    old_classes: int
    new_classes: tuple
    new_path_lr_multiplier: float = 10.0
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "new_classes", tuple(int(c) for c in self.new_classes))
        if not self.new_classes:
            raise ConfigError("at least one new class is required")
        if len(set(self.new_classes)) != len(self.new_classes):
            raise InputError(f"duplicate new class labels {list(self.new_classes)}")
        if not self.new_path_lr_multiplier > 0:
            raise ConfigError("new_path_lr_multiplier must be > 0")


def random_path(arch, widths, label: int, rng, path_id: int | None = None) -> CriticalPath:
    """A He-initialised path (zero biases) of the given per-layer widths."""
    pid = label if path_id is None else path_id
    blocks = []
    j = 0
    for spec in path_specs(arch, widths):
        if spec.param_count():
            layer = build_layer(spec, rng, f"path{pid}.{'head' if j == len(widths) else f'conv{j}'}")
            blocks.extend(layer.params())
            j += 1
    return CriticalPath(pid, label, blocks, ())


def add_incremental_paths(model, inc: IncrementConfig):
    """Append randomly initialised paths for new classes on top of the old shared layers.

    Returns a new model (old paths and shared blocks copied untouched) and the
    per-path learning-rate multipliers: 1.0 for old paths, the configured
    multiplier (default 10x) for new ones.
    """
    if not model.shared:
        raise InputError("model has no shared layers to build on")
    old = model.labels
    if inc.old_classes != len(old):
        raise InputError(f"increment expects {inc.old_classes} old classes, model has {len(old)}")
    clash = sorted(set(inc.new_classes) & set(old))
    if clash:
        raise InputError(f"new class labels {clash} already have critical paths")
    widths = model.paths[0].widths
    rng = np.random.default_rng(inc.init_seed)
    new_paths = [random_path(model.arch, widths, c, rng) for c in inc.new_classes]
    out = model.copy()
    out.paths = sorted(out.paths + new_paths, key=lambda p: p.class_label)
    if isinstance(out, SpecializedModel):
        out.task_mode = TaskMode.CLOSED_SET
    lr_map = {p.path_id: 1.0 for p in model.paths}
    lr_map.update({p.path_id: float(inc.new_path_lr_multiplier) for p in new_paths})
    return out, lr_map
