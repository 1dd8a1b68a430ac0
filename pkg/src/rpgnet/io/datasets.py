"""MNIST IDX and CIFAR-10 binary readers, plus a synthetic stand-in."""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = "test_batch.bin"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.name, self.num_classes)


def _read_bytes(path):
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        path = path + ".gz"
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, expect_magic):
    data = _read_bytes(path)
    if len(data) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack_from(">I", data)
    if magic != expect_magic:
        raise FormatError(f"{path}: bad IDX magic {magic:#010x}, "
                          f"expected {expect_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = int(np.prod(dims))
    if len(data) - header != count:
        raise FormatError(f"{path}: expected {count} data bytes, "
                          f"found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path):
    """Raw MNIST split as ``(uint8 images N x 1 x 28 x 28, int64 labels)``."""
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS).astype(np.int64)
    if len(images) != len(labels):
        raise FormatError("MNIST image and label counts differ")
    if labels.size and labels.max() > 9:
        raise FormatError("MNIST label out of range")
    return images[:, None, :, :], labels


def load_cifar10_bin(path):
    """Raw CIFAR-10 batch file as ``(uint8 images N x 3 x 32 x 32, int64 labels)``."""
    data = _read_bytes(path)
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(data)} is not a multiple of "
                          f"{CIFAR_RECORD}-byte records")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label out of range")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def channel_stats(images):
    x = images.astype(np.float64) / 255.0
    axes = (0, 2, 3)
    return x.mean(axis=axes), x.std(axis=axes)


def normalize(images, mean, std):
    x = images.astype(np.float32) / np.float32(255.0)
    shape = (1, -1, 1, 1)
    return ((x - mean.reshape(shape).astype(np.float32))
            / std.reshape(shape).astype(np.float32))


def _cifar_dir(data_dir):
    nested = os.path.join(data_dir, "cifar-10-batches-bin")
    return nested if os.path.isdir(nested) else data_dir


def load_dataset(name, data_dir=None, seed=0, limit=None):
    """``(train, test)`` normalized with the training split's channel statistics.

    ``name`` is ``mnist``, ``cifar10`` or ``synthetic`` (no files needed).
    ``limit`` truncates both splits, which is useful for smoke runs.
    """
    if name == "synthetic":
        train, test = make_synthetic(seed=seed)
    elif name in ("mnist", "cifar10"):
        if data_dir is None:
            raise FileNotFoundError(f"--data-dir is required for {name}")
        if name == "mnist":
            raw = {split: load_mnist_idx(os.path.join(data_dir, a),
                                         os.path.join(data_dir, b))
                   for split, (a, b) in MNIST_FILES.items()}
        else:
            d = _cifar_dir(data_dir)
            parts = [load_cifar10_bin(os.path.join(d, f)) for f in CIFAR_TRAIN]
            raw = {
                "train": (np.concatenate([p[0] for p in parts]),
                          np.concatenate([p[1] for p in parts])),
                "test": load_cifar10_bin(os.path.join(d, CIFAR_TEST)),
            }
        mean, std = channel_stats(raw["train"][0])
        train = Dataset(normalize(raw["train"][0], mean, std), raw["train"][1], name)
        test = Dataset(normalize(raw["test"][0], mean, std), raw["test"][1], name)
    else:
        raise ValueError(f"unknown dataset {name!r}")
    if limit:
        train, test = train.subset(limit), test.subset(limit)
    return train, test


def make_synthetic(n_train=512, n_test=256, shape=(3, 8, 8), num_classes=10,
                   noise=1.0, seed=0):
    """Gaussian class templates plus isotropic noise.

    Deterministic for a seed; learnable but not trivially separable at
    ``noise=1``.  Used for smoke runs and tests when no dataset is on disk.
    """
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((num_classes,) + tuple(shape))

    def draw(n):
        labels = rng.integers(0, num_classes, n)
        x = templates[labels] + noise * rng.standard_normal((n,) + tuple(shape))
        return Dataset(x.astype(np.float32), labels.astype(np.int64), "synthetic",
                       num_classes)

    return draw(n_train), draw(n_test)
