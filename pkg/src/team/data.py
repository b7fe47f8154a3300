"""Datasets: IDX loading/writing, synthetic templates and device partitioning."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from team.errors import ConfigError, FormatError, InputError, PlanError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(eq=False)
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    label_names: list | None = None
    indices: np.ndarray | None = None  # positions in the source dataset

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise InputError("dataset is empty")
        if self.labels.min() < 0:
            raise InputError("labels must be non-negative")
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.label_names, self.indices[idx])

    def filter_classes(self, classes) -> Dataset:
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))


def _read(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None


def _parse_idx(buf, magic, ndims, what):
    header = 4 + 4 * ndims
    if len(buf) < header:
        raise FormatError(f"{what} file truncated in header: {len(buf)} bytes", offset=len(buf))
    found = struct.unpack_from(">I", buf, 0)[0]
    if found != magic:
        raise FormatError(f"{what} file has magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    dims = struct.unpack_from(f">{ndims}I", buf, 4)
    need = header + math.prod(dims)
    if len(buf) < need:
        raise FormatError(f"{what} file truncated: need {need} bytes for dims {dims}, have {len(buf)}",
                          offset=len(buf))
    if len(buf) > need:
        raise FormatError(f"{what} file has {len(buf) - need} trailing bytes", offset=need)
    return dims, np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (``.gz`` accepted); pixels become ``b / 255``."""
    (n, rows, cols), pixels = _parse_idx(_read(images_path), IDX_IMAGES_MAGIC, 3, "images")
    (m,), labels = _parse_idx(_read(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if n != m:
        raise FormatError(f"count mismatch: {n} images vs {m} labels", offset=4)
    images = (pixels.astype(np.float32) / np.float32(255)).reshape(n, 1, rows, cols)
    return Dataset(images, labels.astype(np.int64))


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write single-channel images (rounded back to bytes) and labels as IDX."""
    if dataset.images.shape[1] != 1:
        raise InputError("IDX images must have exactly one channel")
    n, _, rows, cols = dataset.images.shape
    pixels = np.rint(np.clip(dataset.images, 0, 1) * 255).astype(np.uint8)
    if dataset.labels.max() > 255:
        raise InputError("IDX labels must fit in one byte")
    for path, blob in (
        (images_path, struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes()),
        (labels_path, struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()),
    ):
        path = Path(path)
        if path.suffix == ".gz":
            # mtime=0 keeps the archive byte-stable
            with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
                fh.write(blob)
        else:
            path.write_bytes(blob)


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int
    samples_per_class: int
    image_size: int = 28
    noise_sigma: float = 0.1
    channels: int = 1


def class_template(c: int, classes: int, size: int) -> np.ndarray:
    """A bright square at a class-specific cell of a roughly square grid."""
    grid = math.ceil(math.sqrt(classes))
    cell = size // grid
    if cell < 2:
        raise ConfigError(f"image_size {size} too small for {classes} classes")
    block = max(cell // 2, 1)
    r, col = divmod(c, grid)
    y = r * cell + (cell - block) // 2
    x = col * cell + (cell - block) // 2
    img = np.zeros((size, size), np.float32)
    img[y:y + block, x:x + block] = 1.0
    return img


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    if spec.classes < 2:
        raise ConfigError(f"synthetic data needs >= 2 classes, got {spec.classes}")
    if spec.samples_per_class < 1:
        raise ConfigError("samples_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    templates = np.stack([class_template(c, spec.classes, spec.image_size) for c in range(spec.classes)])
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    images = np.repeat(templates[labels][:, None], spec.channels, axis=1)
    if spec.noise_sigma > 0:
        images = images + rng.normal(0.0, spec.noise_sigma, images.shape).astype(np.float32)
    return Dataset(np.clip(images, 0.0, 1.0), labels)


@dataclass
class PartitionPlan:
    """``proportions[device][class]``: fraction of that class's samples sent to the device."""

    proportions: dict
    imbalance_factor: float = 1.0
    seed: int = 0

    def validate(self, classes=None):
        totals = {}
        for dev, props in self.proportions.items():
            for c, frac in props.items():
                if frac < 0:
                    raise PlanError(f"device {dev}: negative fraction {frac} for class {c}")
                totals[c] = totals.get(c, 0.0) + frac
        for c, total in totals.items():
            if total > 1 + 1e-9:
                raise PlanError(f"class {c} oversubscribed: fractions sum to {total:.6f}")
            if classes is not None and c not in classes:
                raise PlanError(f"plan references class {c} absent from the dataset")


def imbalanced_plan(device_classes: dict, factor: float = 1.0, seed: int = 0) -> PartitionPlan:
    """Each device overweights one class (its ``i``-th, cycling) by ``factor``.

    For one class, the devices holding it split its samples in proportion
    to weight ``factor`` (dominant) versus 1.
    """
    if factor < 1:
        raise ConfigError(f"imbalance_factor must be >= 1, got {factor}")
    weights = {}
    for i, (dev, classes) in enumerate(sorted(device_classes.items())):
        classes = sorted(classes)
        dominant = classes[i % len(classes)]
        weights[dev] = {c: (factor if c == dominant else 1.0) for c in classes}
    totals = {}
    for w in weights.values():
        for c, v in w.items():
            totals[c] = totals.get(c, 0.0) + v
    props = {dev: {c: v / totals[c] for c, v in w.items()} for dev, w in weights.items()}
    return PartitionPlan(props, factor, seed)


def partition(dataset: Dataset, plan: PartitionPlan, devices=None) -> dict:
    """Seeded sampling without replacement; returns ``{device_id: Dataset}``.

    Per class, each device gets ``floor(fraction * count)`` samples and the
    rounding remainder goes to the lowest device id holding the class.
    """
    devices = sorted(plan.proportions if devices is None else devices)
    plan.validate(set(dataset.classes))
    chosen = {d: [] for d in devices}
    for c in dataset.classes:
        holders = [d for d in devices if plan.proportions.get(d, {}).get(c, 0) > 0]
        if not holders:
            continue
        pool = np.flatnonzero(dataset.labels == c)
        pool = pool[np.random.default_rng([plan.seed, c]).permutation(len(pool))]
        fracs = [plan.proportions[d][c] for d in holders]
        counts = [math.floor(f * len(pool) + 1e-9) for f in fracs]
        target = min(math.floor(sum(fracs) * len(pool) + 1e-9), len(pool))
        counts[0] += target - sum(counts)
        start = 0
        for d, k in zip(holders, counts):
            chosen[d].append(pool[start:start + k])
            start += k
    out = {}
    for d in devices:
        idx = np.sort(np.concatenate(chosen[d])) if chosen[d] else np.array([], np.int64)
        if idx.size == 0:
            raise PlanError(f"device {d} receives no samples")
        out[d] = dataset.subset(idx)
    return out


def stratified_split(dataset: Dataset, fractions, seed: int) -> list[Dataset]:
    """Split every class by ``fractions`` (the last part takes the remainder)."""
    parts = [[] for _ in fractions]
    for c in dataset.classes:
        pool = np.flatnonzero(dataset.labels == c)
        pool = pool[np.random.default_rng([seed, c]).permutation(len(pool))]
        start = 0
        for i, f in enumerate(fractions):
            k = len(pool) - start if i == len(fractions) - 1 else math.floor(f * len(pool) + 1e-9)
            parts[i].append(pool[start:start + k])
            start += k
    return [dataset.subset(np.sort(np.concatenate(p))) for p in parts]


def load_mnist_5k() -> Dataset:
    """The 5,000-digit MNIST subset bundled with mlxtend (optional dependency)."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise InputError("the mnist5k source needs the optional 'mlxtend' package") from exc
    x, y = mnist_data()
    return Dataset((np.asarray(x, np.float32) / 255.0).reshape(-1, 1, 28, 28), np.asarray(y))


def export_mnist_5k(out_dir) -> tuple[Path, Path]:
    """Write the mlxtend MNIST subset as an IDX pair; returns ``(images, labels)`` paths."""
    ds = load_mnist_5k()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = out / "mnist5k-images-idx3-ubyte", out / "mnist5k-labels-idx1-ubyte"
    write_idx(ds, *paths)
    return paths
