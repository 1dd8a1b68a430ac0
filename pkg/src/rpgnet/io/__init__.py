from .datasets import Dataset, FormatError, load_cifar10_bin, load_dataset, \
    load_mnist_idx, make_synthetic
from .ringpack import IntegrityError, PackError, VersionError, load, pack, save, \
    unpack

__all__ = [
    "Dataset", "FormatError", "IntegrityError", "PackError", "VersionError",
    "load", "load_cifar10_bin", "load_dataset", "load_mnist_idx",
    "make_synthetic", "pack", "save", "unpack",
]
