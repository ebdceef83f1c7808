from pathlib import Path

import numpy as np
import pytest

from trap import engine, zoo
from trap.data import load_idx_dataset, write_idx

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data" / "mnist5k"


def small_cnn(seed=0, dtype=np.float64, warp=None):
    """conv -> relu -> pool -> conv -> relu -> flatten -> linear on 1x8x8 inputs."""
    rng = np.random.default_rng(seed)
    layers = [
        engine.Conv2d("conv1", 1, 3, 3, padding=1, weight=rng.normal(0, 0.5, (3, 1, 3, 3)), bias=rng.normal(0, 0.1, 3)),
        engine.ReLU("relu1"),
        engine.MaxPool2d("pool1", 2),
        engine.Conv2d("conv2", 3, 4, 3, weight=rng.normal(0, 0.5, (4, 3, 3, 3)), bias=rng.normal(0, 0.1, 4)),
        engine.ReLU("relu2"),
        engine.Flatten("flatten"),
        engine.Linear("fc", 16, 5, weight=rng.normal(0, 0.5, (5, 16)), bias=rng.normal(0, 0.1, 5)),
    ]
    g = engine.ComputeGraph(layers, (1, 8, 8), 5, "small")
    g = g.astype(dtype)
    if warp is not None:
        g = g.with_input_warp(*warp)
    return g


@pytest.fixture(scope="session")
def mnist_train():
    return load_idx_dataset(DATA / "train-images-idx3-ubyte.gz", DATA / "train-labels-idx1-ubyte.gz")


@pytest.fixture(scope="session")
def mnist_test():
    return load_idx_dataset(DATA / "test-images-idx3-ubyte.gz", DATA / "test-labels-idx1-ubyte.gz")


@pytest.fixture(scope="session")
def trained_cnn3(mnist_train, mnist_test):
    """cnn3 after three epochs with the default training settings."""
    graph, meta = zoo.train_model(zoo.build_model(zoo.get_arch("cnn3"), 0), mnist_train, 3, lr=0.02, seed=0,
                                  test_set=mnist_test)
    return graph, meta


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, mnist_train, mnist_test):
    """IDX files with 300 training and 60 test digits, for fast pipeline runs."""
    d = tmp_path_factory.mktemp("tiny")
    for name, ds, n in (("train", mnist_train, 300), ("test", mnist_test, 60)):
        write_idx(d / f"{name}-images.gz", np.round(ds.images[:n, 0] * 255).astype(np.uint8))
        write_idx(d / f"{name}-labels.gz", ds.labels[:n].astype(np.uint8))
    return d


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict; printed in the terminal summary."""

    def record(number, ok, detail):
        _CRITERIA[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
