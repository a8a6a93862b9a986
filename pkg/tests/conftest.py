import os

import numpy as np
import pytest

from spela.datasets import load_idx, load_idx_dir, train_test_split, write_idx
from spela.linalg import make_rng


def pytest_addoption(parser):
    parser.addoption("--run-long", action="store_true", default=False,
                     help="run multi-hour training criteria")


def pytest_configure(config):
    config.addinivalue_line("markers", "long: hours of CPU training; needs --run-long")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-long"):
        return
    skip = pytest.mark.skip(reason="long run; pass --run-long")
    for item in items:
        if "long" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("embeddings")


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def mnist(tmp_path_factory):
    """(train, test) MNIST.

    Full MNIST when $SPELA_DATA_DIR/mnist holds the IDX files; otherwise the
    5000-digit sample bundled with mlxtend, round-tripped through IDX files so
    the loader is on the path either way, and split 4000/1000.
    """
    root = os.environ.get("SPELA_DATA_DIR")
    if root and os.path.isdir(os.path.join(root, "mnist")):
        d = os.path.join(root, "mnist")
        return load_idx_dir(d, "train"), load_idx_dir(d, "test")
    mlx = pytest.importorskip("mlxtend.data")
    X, y = mlx.mnist_data()
    tmp = tmp_path_factory.mktemp("mnist_idx")
    write_idx(tmp / "img", tmp / "lab", X.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8))
    full = load_idx(tmp / "img", tmp / "lab", 10, name="mnist_subset")
    return train_test_split(full, 0.2, make_rng(0))


_VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    skipped = {}
    for rep in terminalreporter.stats.get("skipped", []):
        name = rep.nodeid.rsplit("::", 1)[-1]
        if name.startswith("test_criterion_"):
            skipped[int(name.split("_")[2])] = "NOT RUN (long; pass --run-long)"
    if not _VERDICTS and not skipped:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(set(_VERDICTS) | set(skipped)):
        terminalreporter.write_line(_VERDICTS.get(n, f"criterion {n:2d}: {skipped.get(n)}"))
