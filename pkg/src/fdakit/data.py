"""Readers and writers for the MNIST IDX and CIFAR-10 binary formats."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledImages:
    images: np.ndarray  # N x H x W x C float32 in [0, 1]
    labels: np.ndarray  # N int64

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledImages":
        return LabeledImages(self.images[idx], self.labels[idx])


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx(buf: bytes, expected_magic: int, name: str = "idx") -> np.ndarray:
    if len(buf) < 8:
        raise DatasetFormatError(f"{name}: truncated header ({len(buf)} bytes)")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise DatasetFormatError(f"{name}: bad magic {magic}, expected {expected_magic}")
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DatasetFormatError(f"{name}: truncated header ({len(buf)} bytes)")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = int(np.prod(dims))
    have = len(buf) - header
    if have < need:
        raise DatasetFormatError(f"{name}: truncated payload, expected {need} bytes, got {have}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=header).reshape(dims)


def read_idx_pair(images_path, labels_path) -> LabeledImages:
    imgs = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labs = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if imgs.ndim != 3:
        raise DatasetFormatError(f"{images_path}: expected 3 dimensions, got {imgs.ndim}")
    if len(imgs) != len(labs):
        raise DatasetFormatError(
            f"image/label count mismatch: {len(imgs)} images vs {len(labs)} labels")
    images = (imgs.astype(np.float32) / 255.0)[..., None]
    return LabeledImages(images, labs.astype(np.int64))


def load_mnist(directory, split: str = "test") -> LabeledImages:
    d = Path(directory)
    img, lab = MNIST_FILES[split]
    return read_idx_pair(d / img, d / lab)


def write_idx(path, array: np.ndarray, magic: int):
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def write_mnist(directory, split: str, images_u8: np.ndarray, labels: np.ndarray):
    """Write N x 28 x 28 uint8 images and their labels as an IDX pair."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    img, lab = MNIST_FILES[split]
    write_idx(d / img, images_u8, IDX_IMAGES_MAGIC)
    write_idx(d / lab, np.asarray(labels, dtype=np.uint8), IDX_LABELS_MAGIC)


def parse_cifar_batch(buf: bytes, name: str = "cifar") -> LabeledImages:
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        raise DatasetFormatError(
            f"{name}: size {len(buf)} is not a positive multiple of {CIFAR_RECORD} (truncated record?)")
    recs = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    if labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise DatasetFormatError(f"{name}: record {bad} has label {labels[bad]} >= 10")
    planes = recs[:, 1:].reshape(-1, 3, 32, 32)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return LabeledImages(images, labels)


def load_cifar10(directory, split: str = "test") -> LabeledImages:
    d = Path(directory)
    parts = [parse_cifar_batch(_read_bytes(d / f), f) for f in CIFAR_FILES[split] if (d / f).exists()]
    if not parts:
        raise FileNotFoundError(f"no CIFAR-10 {split} batch files in {d}")
    return LabeledImages(np.concatenate([p.images for p in parts]),
                         np.concatenate([p.labels for p in parts]))


def encode_cifar_records(images_u8: np.ndarray, labels) -> bytes:
    """Inverse of :func:`parse_cifar_batch` for N x 32 x 32 x 3 uint8 images."""
    planes = np.asarray(images_u8, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(len(images_u8), -1)
    recs = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planes], axis=1)
    return recs.tobytes()


def load_dataset(name: str, directory, split: str = "test") -> LabeledImages:
    if name == "mnist":
        return load_mnist(directory, split)
    if name == "cifar10":
        return load_cifar10(directory, split)
    raise ValueError(f"unknown dataset {name!r}")


def mnist_sample_from_mlxtend(directory, n_test: int = 1000, seed: int = 0):
    """Write the 5,000-digit MNIST sample bundled with mlxtend as IDX files.

    A seeded shuffle splits it into ``5000 - n_test`` training and ``n_test``
    test images.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    order = np.random.default_rng(seed).permutation(len(y))
    x = x[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    write_mnist(directory, "train", x[n_test:], y[n_test:])
    write_mnist(directory, "test", x[:n_test], y[:n_test])
    return Path(directory)
