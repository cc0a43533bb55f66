import json
import logging
import os
from typing import List, Optional, Tuple

import numpy as np

from lpnum.common.errors import DatasetError, TruncatedFile
from lpnum.common.qtensor import QTensor
from lpnum.common.util import RngStreams

logger = logging.getLogger("rich")

CIFAR10_SHAPE = (3, 32, 32)
CIFAR10_CLASSES = 10
RECORDS_PER_BATCH = 10000
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


class Dataset:
    images: QTensor
    labels: np.ndarray
    split: str
    classes: int

    def __init__(self, images, labels, split: str = "train", classes: int = CIFAR10_CLASSES, centered: bool = False):
        self.images = images if isinstance(images, QTensor) else QTensor(images)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.split = split
        self.classes = classes
        self.centered = centered
        if self.images.shape[0] != self.labels.size:
            raise DatasetError(f"{self.images.shape[0]} images but {self.labels.size} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= classes):
            raise DatasetError(f"Labels must lie in [0, {classes - 1}]")
        if not centered and self.images.size and (self.images.data.min() < 0.0 or self.images.data.max() > 1.0):
            raise DatasetError("Pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def take(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images.data[indices], self.labels[indices], self.split, self.classes, self.centered)

    def class_counts(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.classes).tolist()


def _read_batch_file(path: str, record_bytes: int) -> Tuple[np.ndarray, np.ndarray]:
    if not os.path.isfile(path):
        raise DatasetError(f"The dataset file {path} does not exist")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise DatasetError(f"The dataset file {path} is empty")
    if raw.size % record_bytes:
        raise TruncatedFile(path=path, expected=(raw.size // record_bytes + 1) * record_bytes, actual=int(raw.size))
    records = raw.reshape(-1, record_bytes)
    labels = records[:, 0]
    bad = np.flatnonzero(labels >= CIFAR10_CLASSES)
    if bad.size:
        offset = int(bad[0]) * record_bytes
        raise DatasetError(f"Bad label byte {int(labels[bad[0]])} in {path} at offset {offset}")
    if records.shape[0] != RECORDS_PER_BATCH:
        logger.warning("%s holds %d records instead of %d", path, records.shape[0], RECORDS_PER_BATCH)
    return records[:, 1:], labels


def load_cifar10(directory: str, split: str = "train") -> Dataset:
    """
    Reads the CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record) in file and
    record order. Pixels map to byte / 255.
    """
    if split not in ("train", "test"):
        raise DatasetError(f"Unknown split '{split}'")
    if not directory or not os.path.isdir(directory):
        raise DatasetError(f"The CIFAR-10 directory {directory} does not exist")
    record_bytes = 1 + int(np.prod(CIFAR10_SHAPE))
    pixels, labels = [], []
    for name in TRAIN_FILES if split == "train" else TEST_FILES:
        p, l = _read_batch_file(os.path.join(directory, name), record_bytes)
        pixels.append(p)
        labels.append(l)
    images = np.concatenate(pixels).reshape((-1,) + CIFAR10_SHAPE).astype(np.float64) / 255.0
    ds = Dataset(images, np.concatenate(labels), split)
    logger.info("Loaded %d %s images from %s", len(ds), split, directory)
    return ds


def write_cifar10_batch(ds: Dataset, path: str) -> None:
    if ds.centered:
        raise DatasetError("Mean-subtracted datasets cannot be written as CIFAR-10 batches")
    pixels = np.rint(ds.images.data.reshape(len(ds), -1) * 255.0).astype(np.uint8)
    records = np.concatenate([ds.labels.astype(np.uint8)[:, None], pixels], axis=1)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    records.tofile(path)


def stratified_indices(labels: np.ndarray, n: int, seed: int, classes: int) -> np.ndarray:
    per_class = [n // classes + (1 if c < n % classes else 0) for c in range(classes)]
    rng = RngStreams(seed).stream("subset")
    chosen = []
    for c, k in enumerate(per_class):
        members = np.flatnonzero(labels == c)
        if members.size < k:
            raise DatasetError(f"Class {c} has {members.size} samples, a stratified subset of {n} needs {k}")
        chosen.append(rng.permutation(members)[:k])
    return np.sort(np.concatenate(chosen))


def subset(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    if n > len(ds):
        raise DatasetError(f"Cannot take {n} samples from a dataset of {len(ds)}")
    if n == len(ds):
        return ds
    return ds.take(stratified_indices(ds.labels, n, seed, ds.classes))


class SyntheticSpec:
    """
    Gaussian class prototypes plus per-image noise. With `separation` >= 1 the classes are
    linearly separable with overwhelming probability for 8x8 images and larger; 0 makes them
    indistinguishable.
    """

    def __init__(self, classes: int = 10, samples_per_class: int = 100, image_size: int = 32,
                 separation: float = 1.0, seed: int = 0, channels: int = 3):
        if classes < 1 or samples_per_class < 1 or image_size < 1:
            raise DatasetError("Synthetic datasets need at least one class, sample and pixel")
        self.classes = classes
        self.samples_per_class = samples_per_class
        self.image_size = image_size
        self.separation = separation
        self.seed = seed
        self.channels = channels

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.channels, self.image_size, self.image_size


def synthesize(spec: SyntheticSpec, split: str = "train") -> Dataset:
    streams = RngStreams(spec.seed)
    prototypes = streams.stream("prototypes").normal(size=(spec.classes,) + spec.image_shape)
    noise_stream = streams.stream("noise", split)
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    labels = streams.stream("order", split).permutation(labels)
    noise = noise_stream.normal(size=(labels.size,) + spec.image_shape)
    images = np.clip(0.5 + 0.15 * (spec.separation * prototypes[labels] + noise), 0.0, 1.0)
    return Dataset(images, labels, split, spec.classes)


def save_dataset(ds: Dataset, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    ds.images.dump(os.path.join(directory, "images"))
    QTensor(ds.labels.astype(np.float64)).dump(os.path.join(directory, "labels"))
    with open(os.path.join(directory, "dataset.json"), "w") as f:
        json.dump({"split": ds.split, "classes": ds.classes, "centered": ds.centered}, f, sort_keys=True)


def load_dataset(directory: str) -> Dataset:
    try:
        with open(os.path.join(directory, "dataset.json"), "r") as f:
            meta = json.load(f)
        images = QTensor.load(os.path.join(directory, "images"))
        labels = QTensor.load(os.path.join(directory, "labels")).data.astype(np.int64)
    except OSError as e:
        raise DatasetError(f"Could not load the dataset in {directory}: {e}")
    return Dataset(images, labels, meta["split"], meta["classes"], meta.get("centered", False))


def channel_means(ds: Dataset) -> np.ndarray:
    return ds.images.data.mean(axis=(0, 2, 3))


def subtract_channel_means(ds: Dataset, means: Optional[np.ndarray] = None) -> Dataset:
    means = channel_means(ds) if means is None else np.asarray(means)
    centered = ds.images.data - means[None, :, None, None]
    return Dataset(centered, ds.labels, ds.split, ds.classes, centered=True)
