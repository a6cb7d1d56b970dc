import numpy as np
import pytest

from ghostnet import dataio
from ghostnet import network as nw


def central_diff(f, x, coords, h=1e-6):
    """Central finite differences of scalar ``f`` at the flat ``coords`` of ``x``."""
    out = []
    flat = x.reshape(-1)
    for c in coords:
        old = flat[c]
        flat[c] = old + h
        fp = f(x)
        flat[c] = old - h
        fm = f(x)
        flat[c] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


@pytest.fixture(scope="session")
def spirals():
    return dataio.gen_synthetic("spirals-2d", 4000, 0.0, 1)


@pytest.fixture(scope="session")
def spiral_mlp(spirals):
    net = nw.build(nw.plain_mlp((2,), 2), seed=1)
    return nw.train(net, spirals, nw.TrainConfig(epochs=50, seed=1))


@pytest.fixture(scope="session")
def digits():
    return dataio.gen_synthetic("digits-8x8", 600, 0.3, 3)


@pytest.fixture(scope="session")
def digit_nets(digits):
    """Briefly trained plain, residual and convolutional nets on the digits task."""
    out = {}
    for i, (name, lr) in enumerate((("plain-mlp", 0.05), ("res-mlp", 0.02), ("small-cnn", 0.05))):
        spec = nw.preset(name, (1, 8, 8), 10)
        out[name] = nw.train(nw.build(spec, i), digits, nw.TrainConfig(epochs=5, lr=lr, seed=i))
    return out


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line; returns the pass flag so tests can assert on it."""

    def record(number, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
