import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdtransfer.data import (
    RECORD_BYTES,
    TEST_FILES,
    TRAIN_FILES,
    Dataset,
    IngestionError,
    batches,
    class_means,
    load_cifar10,
    nearest_mean_predict,
    read_cifar_batch,
    synthetic_blobs,
    train_val_split,
    write_cifar_batch,
)

CIFAR_DIR = os.environ.get("CIFAR10_DIR")


def random_dataset(n, seed=0, split="train"):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, 3, 32, 32)).astype(np.float32)
    return Dataset(images, rng.integers(0, 10, n), split)


def test_record_zero_format(tmp_path):
    record = bytes([7]) + bytes([128]) * 3072
    path = tmp_path / "b.bin"
    path.write_bytes(record + bytes([2]) + bytes(range(256)) * 12)
    images, labels = read_cifar_batch(path)
    assert labels.tolist() == [7, 2]
    assert (images[0] == 128).all()
    # R plane first, row-major inside each plane
    assert images[1, 0, 0, :5].tolist() == [0, 1, 2, 3, 4]
    assert images[1, 1, 0, 0] == (1024 % 256)


def test_truncated_file_reports_offset(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(bytes(RECORD_BYTES * 2 + 100))
    with pytest.raises(IngestionError, match=f"offset {2 * RECORD_BYTES}"):
        read_cifar_batch(path)


def test_missing_file_and_bad_label(tmp_path):
    with pytest.raises(IngestionError, match="not found"):
        read_cifar_batch(tmp_path / "absent.bin")
    path = tmp_path / "b.bin"
    path.write_bytes(bytes(RECORD_BYTES) + bytes([11]) + bytes(3072))
    with pytest.raises(IngestionError, match=f"offset {RECORD_BYTES}"):
        read_cifar_batch(path)
    with pytest.raises(IngestionError):
        load_cifar10(tmp_path / "nowhere")


def test_write_read_round_trip_exact(tmp_path):
    ds = random_dataset(25)
    path = tmp_path / "b.bin"
    write_cifar_batch(ds, path)
    assert path.stat().st_size == 25 * RECORD_BYTES
    images, labels = read_cifar_batch(path)
    np.testing.assert_array_equal(images, ds.images)
    np.testing.assert_array_equal(labels, ds.labels)


@pytest.mark.parametrize("nested", [False, True])
def test_load_directory_layout(tmp_path, nested):
    root = tmp_path / "cifar-10-batches-bin" if nested else tmp_path
    root.mkdir(exist_ok=True)
    for i, name in enumerate(TRAIN_FILES + TEST_FILES):
        write_cifar_batch(random_dataset(4 + i, seed=i), root / name)
    train, test = load_cifar10(str(tmp_path))
    assert len(train) == sum(4 + i for i in range(5))
    assert len(test) == 9
    assert train.split == "train" and test.split == "test"
    np.testing.assert_array_equal(train.images[:4], random_dataset(4, seed=0).images)


@pytest.mark.skipif(not CIFAR_DIR, reason="CIFAR10_DIR not set")
def test_full_cifar10_counts():
    train, test = load_cifar10(CIFAR_DIR)
    assert len(train) == 50_000 and len(test) == 10_000
    assert train.labels.min() >= 0 and train.labels.max() <= 9
    assert test.labels.min() >= 0 and test.labels.max() <= 9


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 32, 32), np.float32), np.array([0]))
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 3, 32, 32), np.float32), np.array([10]))
    with pytest.raises(ValueError):
        Dataset(np.full((1, 3, 32, 32), 256, np.float32), np.array([0]))


def test_split_counts_and_determinism():
    ds = Dataset(np.zeros((50_000, 1, 1, 1), np.float32), np.repeat(np.arange(10), 5000))
    tr, va = train_val_split(ds, 0.1, seed=3)
    assert (len(tr), len(va)) == (45_000, 5_000)
    tr2, va2 = train_val_split(ds, 0.1, seed=3)
    np.testing.assert_array_equal(va.labels, va2.labels)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(10, 400), frac=st.floats(0.05, 0.9), seed=st.integers(0, 5))
def test_split_stratified_disjoint_exhaustive(n, frac, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n)
    ds = Dataset(np.zeros((n, 1, 1, 1), np.float32), labels)
    tr, va = train_val_split(ds, frac, seed)
    assert len(tr) + len(va) == n
    n_val = round(n * frac)
    assert len(va) == n_val
    for c in range(10):
        expected = (labels == c).sum() * n_val / n
        assert abs((va.labels == c).sum() - expected) < 1 + 1e-9
    assert sorted(np.concatenate([tr.labels, va.labels]).tolist()) == sorted(labels.tolist())


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        train_val_split(random_dataset(10), 1.0)


def test_synthetic_nearest_mean_oracle():
    train = synthetic_blobs(n_per_class=50, seed=0, separation=60, noise_std=1)
    test = synthetic_blobs(n_per_class=50, seed=0, separation=60, noise_std=1, split="test")
    acc = (nearest_mean_predict(class_means(train), test.images) == test.labels).mean()
    assert acc >= 0.99


def test_synthetic_deterministic_and_balanced():
    a = synthetic_blobs(n_per_class=7, seed=4, shift=2)
    b = synthetic_blobs(n_per_class=7, seed=4, shift=2)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [7] * 10
    assert a.images.min() >= 0 and a.images.max() <= 255
    assert a.images.shape == (70, 3, 32, 32)
    c = synthetic_blobs(n_per_class=7, seed=5, shift=2)
    assert not np.array_equal(a.images, c.images)


def test_batches_sizes_and_union():
    ds = random_dataset(10)
    sizes = [len(lab) for _, lab, _ in batches(ds, 4, shuffle_seed=0)]
    assert sizes == [4, 4, 2]
    idx = np.concatenate([i for _, _, i in batches(ds, 4, shuffle_seed=0, epoch=1)])
    assert sorted(idx.tolist()) == list(range(10))


def test_batches_permutations_per_epoch():
    ds = random_dataset(50)

    def order(epoch):
        return np.concatenate([i for _, _, i in batches(ds, 8, shuffle_seed=1, epoch=epoch)])

    np.testing.assert_array_equal(order(0), order(0))
    assert not np.array_equal(order(0), order(1))
    assert np.concatenate([i for _, _, i in batches(ds, 8)]).tolist() == list(range(50))
    with pytest.raises(ValueError):
        next(batches(ds, 0))


def test_channel_stats():
    ds = random_dataset(20)
    mean, std = ds.channel_stats()
    np.testing.assert_allclose(mean, ds.images.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(std, ds.images.std(axis=(0, 2, 3)), rtol=1e-4)


def test_synthetic_splits_share_classes_not_samples():
    tr = synthetic_blobs(n_per_class=5, seed=2, split="train")
    te = synthetic_blobs(n_per_class=5, seed=2, split="test")
    assert not np.array_equal(tr.images, te.images)
    np.testing.assert_allclose(class_means(tr), class_means(te), atol=5.0)
