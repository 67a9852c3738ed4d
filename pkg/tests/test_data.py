"""Toy dataset generator and external npz loading."""

import numpy as np
import pytest

from statflow.data import Dataset, load_dataset_npz, make_toy_dataset, resize_images
from statflow.errors import ValidationError


def test_toy_shapes_range_and_balance():
    ds = make_toy_dataset(num_classes=10, per_class=12, resolution=32, seed=0)
    assert ds.images.shape == (120, 3, 32, 32)
    assert ds.images.dtype == np.float32
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    counts = np.bincount(ds.labels, minlength=10)
    assert (counts == 12).all()


def test_toy_deterministic_per_seed_and_split():
    a = make_toy_dataset(3, 5, 32, seed=4)
    b = make_toy_dataset(3, 5, 32, seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    c = make_toy_dataset(3, 5, 32, seed=5)
    assert not np.array_equal(a.images, c.images)
    v = make_toy_dataset(3, 5, 32, seed=4, split="val")
    assert not np.array_equal(a.images, v.images)


def test_toy_classes_distinguishable():
    ds = make_toy_dataset(10, 8, 32, seed=1)
    per_class_mean = np.stack([
        ds.images[ds.labels == c].mean(axis=0).ravel() for c in range(10)])
    d = np.linalg.norm(per_class_mean[:, None] - per_class_mean[None], axis=2)
    off_diag = d[~np.eye(10, dtype=bool)]
    assert off_diag.min() > 0.1


def test_toy_rejects_too_many_classes():
    with pytest.raises(ValidationError):
        make_toy_dataset(num_classes=11)
    with pytest.raises(ValidationError):
        make_toy_dataset(split="nope")


def test_batches_cover_dataset():
    ds = make_toy_dataset(2, 7, 32, seed=0)
    seen = 0
    for imgs, labels in ds.batches(4):
        assert imgs.shape[0] == labels.shape[0]
        seen += len(labels)
    assert seen == 14


def test_npz_round_trip(tmp_path):
    ds = make_toy_dataset(3, 4, 32, seed=2)
    path = str(tmp_path / "d.npz")
    np.savez(path, images=ds.images, labels=ds.labels)
    loaded = load_dataset_npz(path)
    np.testing.assert_array_equal(loaded.images, ds.images)
    assert loaded.num_classes == 3


def test_npz_resize_and_uint8(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(6, 3, 16, 16), dtype=np.uint8)
    path = str(tmp_path / "d.npz")
    np.savez(path, images=imgs, labels=np.arange(6) % 2)
    loaded = load_dataset_npz(path, resolution=32)
    assert loaded.images.shape == (6, 3, 32, 32)
    assert loaded.images.max() <= 1.0


def test_npz_missing_keys(tmp_path):
    path = str(tmp_path / "bad.npz")
    np.savez(path, pictures=np.zeros((1, 3, 8, 8)))
    with pytest.raises(ValidationError):
        load_dataset_npz(path)


def test_resize_images_deterministic():
    imgs = np.random.default_rng(1).uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
    a = resize_images(imgs, 32)
    b = resize_images(imgs, 32)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (2, 3, 32, 32)


def test_dataset_label_validation():
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 3, 8, 8), np.float32), np.array([0, 3]), 3)
