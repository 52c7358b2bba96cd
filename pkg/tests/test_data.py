import gzip
import struct

import numpy as np
import pytest

from fdakit import data


def _digits(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (n, 28, 28), dtype=np.uint8), rng.integers(0, 10, n, dtype=np.uint8)


def test_mnist_round_trip(tmp_path):
    x, y = _digits(12)
    x[0, 0, 0] = 255
    x[0, 0, 1] = 0
    data.write_mnist(tmp_path, "test", x, y)
    ds = data.load_mnist(tmp_path, "test")
    assert ds.images.shape == (12, 28, 28, 1) and ds.images.dtype == np.float32
    assert ds.images[0, 0, 0, 0] == 1.0 and ds.images[0, 0, 1, 0] == 0.0
    np.testing.assert_array_equal(np.rint(ds.images[..., 0] * 255).astype(np.uint8), x)
    assert ds.labels.tolist() == y.tolist()


def test_mnist_gzip(tmp_path):
    x, y = _digits(3)
    data.write_mnist(tmp_path, "train", x, y)
    for name in data.MNIST_FILES["train"]:
        raw = (tmp_path / name).read_bytes()
        (tmp_path / name).unlink()
        (tmp_path / (name + ".gz")).write_bytes(gzip.compress(raw))
    assert len(data.load_mnist(tmp_path, "train")) == 3


def test_count_mismatch_names_both(tmp_path):
    x, _ = _digits(5)
    _, y = _digits(4)
    data.write_mnist(tmp_path, "test", x, np.zeros(5, np.uint8))
    img, lab = data.MNIST_FILES["test"]
    data.write_idx(tmp_path / lab, y, data.IDX_LABELS_MAGIC)
    with pytest.raises(data.DatasetFormatError, match="5 images vs 4 labels"):
        data.load_mnist(tmp_path, "test")


def test_bad_magic():
    buf = struct.pack(">I", 1234) + b"\x00" * 8
    with pytest.raises(data.DatasetFormatError, match="magic"):
        data.parse_idx(buf, data.IDX_IMAGES_MAGIC)


@pytest.mark.parametrize("cut", [3, 10, 200])
def test_truncated_idx(tmp_path, cut):
    x, y = _digits(2)
    data.write_idx(tmp_path / "img", x, data.IDX_IMAGES_MAGIC)
    buf = (tmp_path / "img").read_bytes()
    with pytest.raises(data.DatasetFormatError, match="truncated"):
        data.parse_idx(buf[:cut] if cut < 16 else buf[:-cut], data.IDX_IMAGES_MAGIC)


def test_cifar_round_trip():
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (7, 32, 32, 3), dtype=np.uint8)
    labels = rng.integers(0, 10, 7)
    ds = data.parse_cifar_batch(data.encode_cifar_records(imgs, labels))
    np.testing.assert_array_equal(np.rint(ds.images * 255).astype(np.uint8), imgs)
    assert ds.labels.tolist() == labels.tolist()


def test_cifar_planar_layout():
    rec = np.zeros(data.CIFAR_RECORD, np.uint8)
    rec[0] = 4
    rec[1 + 0 * 1024 + 5] = 255        # red plane, row 0, col 5
    rec[1 + 2 * 1024 + 32 + 1] = 51    # blue plane, row 1, col 1
    ds = data.parse_cifar_batch(rec.tobytes())
    assert ds.images[0, 0, 5, 0] == 1.0
    assert ds.images[0, 1, 1, 2] == pytest.approx(0.2)
    assert ds.labels[0] == 4


def test_cifar_full_batch_file(tmp_path):
    n = 10000
    rng = np.random.default_rng(1)
    recs = rng.integers(0, 256, (n, data.CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] %= 10
    (tmp_path / "test_batch.bin").write_bytes(recs.tobytes())
    ds = data.load_cifar10(tmp_path, "test")
    assert len(ds) == n and ds.images.shape == (n, 32, 32, 3)


def test_cifar_truncated_record():
    with pytest.raises(data.DatasetFormatError, match="3073"):
        data.parse_cifar_batch(b"\x00" * 3072)


def test_cifar_bad_label():
    rec = np.zeros((2, data.CIFAR_RECORD), np.uint8)
    rec[1, 0] = 10
    with pytest.raises(data.DatasetFormatError, match="record 1"):
        data.parse_cifar_batch(rec.tobytes())


def test_cifar_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        data.load_cifar10(tmp_path, "test")


def test_load_dataset_dispatch(tmp_path):
    x, y = _digits(2)
    data.write_mnist(tmp_path, "test", x, y)
    assert len(data.load_dataset("mnist", tmp_path)) == 2
    with pytest.raises(ValueError):
        data.load_dataset("svhn", tmp_path)


def test_subset():
    ds = data.LabeledImages(np.zeros((5, 2, 2, 1), np.float32), np.arange(5))
    assert ds.subset([4, 1]).labels.tolist() == [4, 1]
