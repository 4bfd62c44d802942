from pathlib import Path

import numpy as np
import pytest

from elasticfl.data import load_idx
from elasticfl.models import Batch, ModelSpec

DATA = Path(__file__).resolve().parent.parent / "data" / "mnist5k"
MNIST_IMAGES = DATA / "train-images-idx3-ubyte.gz"
MNIST_LABELS = DATA / "train-labels-idx1-ubyte.gz"

MODEL_SPECS = {
    "linear": ModelSpec("linear-regression", 4, l2=0.1),
    "softmax": ModelSpec("softmax-regression", 4, 3, l2=0.05),
    "mlp-tanh": ModelSpec("mlp-1hidden", 4, 3, hidden=5, activation="tanh", l2=0.01),
    "mlp-relu": ModelSpec("mlp-1hidden", 4, 3, hidden=5, activation="relu"),
}


def random_batch(rng, spec: ModelSpec, n: int) -> Batch:
    X = rng.normal(size=(n, spec.input_dim))
    if spec.is_classifier:
        y = rng.integers(0, spec.classes, size=n)
    else:
        y = rng.normal(size=n)
    return Batch(X, y)


def central_diff(f, w, h=1e-6):
    g = np.zeros_like(w)
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = h
        g[j] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def fd_rel_error(g, g_fd):
    return np.max(np.abs(g - g_fd) / np.maximum(1.0, np.abs(g_fd)))


@pytest.fixture(scope="session")
def mnist():
    return load_idx(MNIST_IMAGES, MNIST_LABELS)


# --------------------------------------------------------- acceptance report

_criteria: dict[str, str] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    label = marker.args[0]
    ok = call.excinfo is None
    prev = _criteria.get(label, "PASS")
    _criteria[label] = "PASS" if ok and prev == "PASS" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_criteria, key=lambda s: int(s.split()[0].lstrip("AC"))):
        terminalreporter.write_line(f"{_criteria[label]}  {label}")
