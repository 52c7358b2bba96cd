import json

import numpy as np
import pytest

from fdakit import data, nn
from fdakit.tensor import Tensor


def tiny_arch(input_shape=(8, 8, 1), classes=3):
    return nn.Architecture(
        [nn.Conv(3, 3, 4, 1, 1), nn.ReLU(), nn.MaxPool(2),
         nn.Flatten(), nn.Dense(8), nn.ReLU(), nn.Dense(classes)],
        input_shape, classes, name="tiny")


def small_mnist_arch_dict():
    return {
        "name": "small-mnist",
        "input_shape": [28, 28, 1],
        "num_classes": 10,
        "layers": [
            {"type": "conv", "kh": 5, "kw": 5, "cout": 8, "stride": 2, "padding": 2},
            {"type": "relu"},
            {"type": "maxpool", "window": 2},
            {"type": "flatten"},
            {"type": "dense", "units": 32},
            {"type": "relu"},
            {"type": "dense", "units": 10},
        ],
    }


def as_float64(model):
    m = model.copy()
    for p in m.parameters.values():
        p.data = p.data.astype(np.float64)
    return m


@pytest.fixture
def tiny_model():
    return nn.build_model(tiny_arch(), init_seed=3)


@pytest.fixture
def tiny_images():
    return np.random.default_rng(0).random((6, 8, 8, 1)).astype(np.float32)


@pytest.fixture(scope="session")
def small_mnist_dir(tmp_path_factory):
    """400 training / 120 test real MNIST digits in IDX format."""
    from mlxtend.data import mnist_data

    d = tmp_path_factory.mktemp("mnist_small")
    x, y = mnist_data()
    order = np.random.default_rng(1).permutation(len(y))
    x = x[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    data.write_mnist(d, "train", x[:400], y[:400])
    data.write_mnist(d, "test", x[400:520], y[400:520])
    return d


@pytest.fixture(scope="session")
def small_config_file(tmp_path_factory, small_mnist_dir):
    d = tmp_path_factory.mktemp("cfg")
    cfg = {
        "model": "small-mnist",
        "dataset": "mnist",
        "data_dir": str(small_mnist_dir),
        "architecture": small_mnist_arch_dict(),
        "train": {"epochs": 2, "batch_size": 32, "lr": 0.02, "seed": 0},
        "eval": {"n_images": 40, "k_max": 10, "seed": 0},
    }
    path = d / "experiment.json"
    path.write_text(json.dumps(cfg))
    return path


def to_tensor(x):
    return Tensor(np.asarray(x))
