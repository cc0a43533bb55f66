import os

import numpy as np
import pytest

from lpnum.common.data import (CIFAR10_SHAPE, Dataset, SyntheticSpec, channel_means, load_cifar10, load_dataset,
                               save_dataset, subset, subtract_channel_means, synthesize, write_cifar10_batch)
from lpnum.common.errors import DatasetError, TruncatedFile


def tiny_cifar(n: int = 20, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(n,) + CIFAR10_SHAPE).astype(np.float64) / 255.0
    return Dataset(pixels, np.arange(n) % 10)


def write_cifar_dir(directory: str) -> Dataset:
    ds = tiny_cifar()
    for i in range(1, 6):
        write_cifar10_batch(ds, os.path.join(directory, f"data_batch_{i}.bin"))
    write_cifar10_batch(ds, os.path.join(directory, "test_batch.bin"))
    return ds


class TestDataset:

    @staticmethod
    @pytest.mark.parametrize("images, labels", [
        (np.zeros((3, 3, 2, 2)), [0, 1]),
        (np.zeros((2, 3, 2, 2)), [0, 10]),
        (np.full((1, 3, 2, 2), 1.5), [0]),
    ])
    def test_invalid(images, labels):
        with pytest.raises(DatasetError):
            Dataset(images, labels)

    @staticmethod
    def test_class_counts(train_set: Dataset):
        assert train_set.class_counts() == [8, 8, 8]
        assert train_set.image_shape == (3, 16, 16)


class TestCifar10:

    @staticmethod
    def test_load(tmp_path):
        directory = str(tmp_path)
        written = write_cifar_dir(directory)
        train_set = load_cifar10(directory, "train")
        test_set = load_cifar10(directory, "test")
        assert len(train_set) == 5 * len(written)
        assert np.array_equal(test_set.images.data, written.images.data)
        assert np.array_equal(test_set.labels, written.labels)

    @staticmethod
    def test_short_batch_warns(tmp_path, caplog):
        directory = str(tmp_path)
        write_cifar_dir(directory)
        with caplog.at_level("WARNING", logger="rich"):
            load_cifar10(directory, "test")
        assert "holds 20 records instead of 10000" in caplog.text

    @staticmethod
    def test_truncated(tmp_path):
        directory = str(tmp_path)
        write_cifar_dir(directory)
        path = os.path.join(directory, "test_batch.bin")
        with open(path, "ab") as f:
            f.write(b"\x01\x02\x03")
        with pytest.raises(TruncatedFile) as e:
            load_cifar10(directory, "test")
        assert "test_batch.bin" in str(e.value)

    @staticmethod
    def test_bad_label(tmp_path):
        directory = str(tmp_path)
        write_cifar_dir(directory)
        path = os.path.join(directory, "test_batch.bin")
        raw = np.fromfile(path, dtype=np.uint8)
        raw[3073] = 42
        raw.tofile(path)
        with pytest.raises(DatasetError) as e:
            load_cifar10(directory, "test")
        assert "offset 3073" in str(e.value)

    @staticmethod
    def test_missing_files(tmp_path):
        with pytest.raises(DatasetError):
            load_cifar10(str(tmp_path), "train")
        with pytest.raises(DatasetError):
            load_cifar10(os.path.join(str(tmp_path), "nowhere"), "train")
        with pytest.raises(DatasetError):
            load_cifar10(str(tmp_path), "validation")


class TestSubset:

    @staticmethod
    def test_stratified():
        ds = synthesize(SyntheticSpec(classes=4, samples_per_class=10, image_size=4))
        picked = subset(ds, 10, seed=1)
        assert len(picked) == 10
        assert picked.class_counts() == [3, 3, 2, 2]

    @staticmethod
    def test_reproducible():
        ds = synthesize(SyntheticSpec(classes=4, samples_per_class=10, image_size=4))
        assert np.array_equal(subset(ds, 12, seed=2).labels, subset(ds, 12, seed=2).labels)

    @staticmethod
    def test_too_large(train_set: Dataset):
        with pytest.raises(DatasetError):
            subset(train_set, len(train_set) + 1)

    @staticmethod
    def test_full_size_is_identity(train_set: Dataset):
        assert subset(train_set, len(train_set)) is train_set


class TestSynthetic:

    @staticmethod
    def test_shapes_and_range(train_set: Dataset):
        assert len(train_set) == 24
        assert train_set.images.shape == (24, 3, 16, 16)
        assert 0.0 <= train_set.images.data.min() <= train_set.images.data.max() <= 1.0

    @staticmethod
    def test_reproducible(synthetic_spec: SyntheticSpec):
        assert np.array_equal(synthesize(synthetic_spec).images.data, synthesize(synthetic_spec).images.data)

    @staticmethod
    def test_splits_differ(train_set: Dataset, test_set: Dataset):
        assert not np.array_equal(train_set.images.data, test_set.images.data)

    @staticmethod
    def test_invalid_spec():
        with pytest.raises(DatasetError):
            SyntheticSpec(classes=0)

    @staticmethod
    @pytest.mark.parametrize("separation, separable", [(4.0, True), (0.0, False)])
    def test_separation_controls_difficulty(separation: float, separable: bool):
        spec = SyntheticSpec(classes=4, samples_per_class=50, image_size=8, separation=separation, seed=3)
        train, test = synthesize(spec, "train"), synthesize(spec, "test")
        centroids = np.stack([train.images.data[train.labels == c].mean(axis=0) for c in range(4)])
        distances = ((test.images.data[:, None] - centroids[None]) ** 2).reshape(len(test), 4, -1).sum(axis=2)
        accuracy = 100.0 * np.mean(np.argmin(distances, axis=1) == test.labels)
        if separable:
            assert accuracy >= 95.0
        else:
            assert accuracy < 50.0


class TestPersistence:

    @staticmethod
    def test_save_and_load(train_set: Dataset, tmp_path):
        directory = os.path.join(str(tmp_path), "train")
        save_dataset(train_set, directory)
        loaded = load_dataset(directory)
        assert np.array_equal(loaded.images.data, train_set.images.data)
        assert np.array_equal(loaded.labels, train_set.labels)
        assert loaded.classes == 3

    @staticmethod
    def test_load_missing(tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(str(tmp_path))

    @staticmethod
    def test_mean_subtraction(train_set: Dataset, test_set: Dataset):
        means = channel_means(train_set)
        centered = subtract_channel_means(train_set, means)
        assert centered.centered
        assert np.allclose(channel_means(centered), 0.0)
        shifted = subtract_channel_means(test_set, means)
        assert np.allclose(shifted.images.data, test_set.images.data - means[None, :, None, None])

    @staticmethod
    def test_centered_cannot_be_written(train_set: Dataset, tmp_path):
        with pytest.raises(DatasetError):
            write_cifar10_batch(subtract_channel_means(train_set), os.path.join(str(tmp_path), "b.bin"))
