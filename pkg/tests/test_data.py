import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from team.data import (
    Dataset,
    PartitionPlan,
    SyntheticSpec,
    generate_synthetic,
    imbalanced_plan,
    load_idx,
    partition,
    stratified_split,
    write_idx,
)
from team.errors import FormatError, InputError, PlanError
from team.training import evaluate


def idx_pair(tmp_path, pixels, labels, n_img=None, n_lab=None, magic_img=0x803, magic_lab=0x801):
    pixels = np.asarray(pixels, np.uint8)
    n, r, c = pixels.shape
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(struct.pack(">IIII", magic_img, n if n_img is None else n_img, r, c) + pixels.tobytes())
    lp.write_bytes(struct.pack(">II", magic_lab, len(labels) if n_lab is None else n_lab) + bytes(labels))
    return ip, lp


def test_two_image_fixture(tmp_path):
    px = [[[0, 255], [128, 1]], [[7, 8], [9, 10]]]
    ds = load_idx(*idx_pair(tmp_path, px, [3, 1]))
    assert ds.images.shape == (2, 1, 2, 2)
    assert ds.images.dtype == np.float32
    expected = (np.array(px, np.float32) / np.float32(255))[:, None]
    assert np.array_equal(ds.images, expected)
    assert ds.labels.tolist() == [3, 1]


def test_count_mismatch(tmp_path):
    with pytest.raises(FormatError, match="2.*3|3.*2"):
        load_idx(*idx_pair(tmp_path, np.zeros((2, 2, 2)), [0, 1, 2]))


def test_bad_magic_has_offset(tmp_path):
    with pytest.raises(FormatError, match="offset 0"):
        load_idx(*idx_pair(tmp_path, np.zeros((1, 2, 2)), [0], magic_img=0x801))
    with pytest.raises(FormatError, match="offset"):
        load_idx(*idx_pair(tmp_path, np.zeros((1, 2, 2)), [0], magic_lab=0x803))


def test_truncated_file(tmp_path):
    ip, lp = idx_pair(tmp_path, np.zeros((3, 4, 4)), [1, 2, 3])
    ip.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(FormatError, match="offset"):
        load_idx(ip, lp)
    ip, lp = idx_pair(tmp_path, np.zeros((3, 4, 4)), [1, 2, 3])
    lp.write_bytes(lp.read_bytes()[:6])
    with pytest.raises(FormatError, match="header"):
        load_idx(ip, lp)


def test_gzip_accepted(tmp_path):
    ip, lp = idx_pair(tmp_path, np.arange(8).reshape(2, 2, 2), [0, 1])
    gi, gl = tmp_path / "i.gz", tmp_path / "l.gz"
    gi.write_bytes(gzip.compress(ip.read_bytes()))
    gl.write_bytes(gzip.compress(lp.read_bytes()))
    assert np.array_equal(load_idx(gi, gl).images, load_idx(ip, lp).images)


@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_write_load_roundtrip_bytes(n, r, c, seed):
    import tempfile
    from pathlib import Path
    rng = np.random.default_rng(seed)
    with tempfile.TemporaryDirectory() as d:
        tmp = Path(d)
        ip, lp = idx_pair(tmp, rng.integers(0, 256, (n, r, c)), rng.integers(0, 10, n).tolist())
        ds = load_idx(ip, lp)
        write_idx(ds, tmp / "a", tmp / "b")
        assert (tmp / "a").read_bytes() == ip.read_bytes()
        assert (tmp / "b").read_bytes() == lp.read_bytes()
        assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_synthetic_zero_noise_identical_per_class():
    ds = generate_synthetic(SyntheticSpec(5, 4, 16, 0.0), seed=1)
    for c in range(5):
        imgs = ds.images[ds.labels == c]
        assert all(np.array_equal(imgs[0], im) for im in imgs)
    firsts = [ds.images[ds.labels == c][0].tobytes() for c in range(5)]
    assert len(set(firsts)) == 5


def test_synthetic_seeded():
    a = generate_synthetic(SyntheticSpec(4, 10, 12, 0.3), seed=9)
    b = generate_synthetic(SyntheticSpec(4, 10, 12, 0.3), seed=9)
    c = generate_synthetic(SyntheticSpec(4, 10, 12, 0.3), seed=10)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.tobytes() != c.images.tobytes()
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_synthetic_separable_by_tiny_cnn(trained10, separable10):
    assert evaluate(trained10, separable10).accuracy == 1.0


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 4, 4)), [0, 1])
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 1, 4, 4)), [0])
    with pytest.raises(InputError):
        Dataset(np.zeros((1, 1, 4, 4)), [-1])


@pytest.fixture
def hundred():
    return generate_synthetic(SyntheticSpec(3, 100, 12, 0.1), seed=0)


def test_half_half_partition(hundred):
    plan = PartitionPlan({0: {c: 0.5 for c in range(3)}, 1: {c: 0.5 for c in range(3)}}, seed=4)
    parts = partition(hundred, plan)
    for d in (0, 1):
        assert parts[d].class_counts() == {0: 50, 1: 50, 2: 50}
    assert not set(parts[0].indices) & set(parts[1].indices)


def test_imbalance_factor_four(hundred):
    plan = imbalanced_plan({0: [0, 1, 2], 1: [0, 1, 2], 2: [0, 1, 2]}, 4.0, seed=1)
    parts = partition(hundred, plan)
    for d, ds in parts.items():
        props = plan.proportions[d]
        assert max(props.values()) / min(props.values()) == pytest.approx(4.0, rel=1e-12)
        counts = ds.class_counts()
        assert max(counts, key=counts.get) == d
        for c, k in counts.items():
            base = int(props[c] * 100 + 1e-9)
            # lowest holder (device 0) absorbs the rounding remainder
            assert base <= k <= base + (2 if d == 0 else 0)


def test_remainder_goes_to_lowest_device(hundred):
    plan = PartitionPlan({5: {0: 1 / 3}, 2: {0: 1 / 3}, 9: {0: 1 / 3}})
    parts = partition(hundred.filter_classes([0]), plan)
    assert [len(parts[d]) for d in (2, 5, 9)] == [34, 33, 33]


@given(st.integers(2, 5), st.floats(1.0, 8.0), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_partition_disjoint_and_deterministic(n_dev, factor, seed):
    ds = generate_synthetic(SyntheticSpec(4, 30, 8, 0.1), seed=2)
    plan = imbalanced_plan({d: [0, 1, 2, 3] for d in range(n_dev)}, factor, seed)
    parts = partition(ds, plan)
    seen = []
    for p in parts.values():
        seen.extend(p.indices.tolist())
    assert len(seen) == len(set(seen))
    again = partition(ds, plan)
    assert all(np.array_equal(parts[d].indices, again[d].indices) for d in parts)
    for d, p in parts.items():
        for c, k in p.class_counts().items():
            # floor rounding, plus the remainder on the lowest holder
            assert abs(k - plan.proportions[d][c] * 30) < (n_dev if d == 0 else 1)


def test_oversubscribed_plan(hundred):
    plan = PartitionPlan({0: {1: 0.7}, 1: {1: 0.5}})
    with pytest.raises(PlanError, match="class 1"):
        partition(hundred, plan)


def test_stratified_split(hundred):
    a, b, c = stratified_split(hundred, [0.2, 0.5, 0.3], seed=3)
    assert a.class_counts() == {0: 20, 1: 20, 2: 20}
    assert b.class_counts() == {0: 50, 1: 50, 2: 50}
    assert c.class_counts() == {0: 30, 1: 30, 2: 30}
    idx = np.concatenate([a.indices, b.indices, c.indices])
    assert len(set(idx.tolist())) == 300
