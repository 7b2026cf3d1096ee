import os
from pathlib import Path

import numpy as np
import pytest

from robustq.data import DatasetHandle, gen_synthetic
from robustq.nets import NetworkSpec, build_network

MNIST_DIR = os.environ.get("ROBUSTQ_MNIST_DIR")


def pytest_collection_modifyitems(config, items):
    if MNIST_DIR:
        return
    skip = pytest.mark.skip(reason="set ROBUSTQ_MNIST_DIR to run MNIST training tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def mnist_dir() -> Path:
    return Path(MNIST_DIR)


@pytest.fixture
def tiny_spec():
    return NetworkSpec(input_shape=(1, 6, 6), blocks=(1, 1), widths=(4, 6), num_classes=3)


@pytest.fixture
def tiny_net(tiny_spec):
    return build_network(tiny_spec, seed=3)


@pytest.fixture
def tiny_batch(tiny_spec):
    rng = np.random.default_rng(11)
    x = rng.uniform(0.0, 1.0, size=(5,) + tiny_spec.input_shape)
    y = rng.integers(0, tiny_spec.num_classes, size=5)
    return x, y


@pytest.fixture
def blobs():
    return gen_synthetic("blobs", 64, 0.2, seed=0)


@pytest.fixture
def blobs_net():
    spec = NetworkSpec(input_shape=(1, 1, 2), arch="mlp", hidden=(8,), num_classes=2)
    return build_network(spec, seed=0)


@pytest.fixture
def image_data():
    """Forty 6x6 images in four classes separated by brightness."""
    rng = np.random.default_rng(5)
    labels = np.arange(40) % 4
    images = rng.uniform(0.0, 0.2, size=(40, 1, 6, 6)) + 0.2 * labels[:, None, None, None]
    return DatasetHandle("toy", "train", np.clip(images, 0.0, 1.0), labels)
