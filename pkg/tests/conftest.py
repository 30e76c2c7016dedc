import sys

import numpy as np
import pytest

from funcspace.nn import Batch, init_network


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-5, floor=1e-6):
    """Per-coordinate relative error, with an absolute floor for near-zero entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < rtol, f"max relative error {rel.max():.3e} at {rel.argmax()}"


def random_problem(seed, dims=(4, 5, 3), n=7, activations=None):
    rng = np.random.default_rng(seed)
    net = init_network(list(dims), activations, seed=seed)
    # nonzero biases so every code path carries signal
    net.params += rng.normal(scale=0.1, size=net.n_params)
    batch = Batch(rng.normal(size=(n, dims[0])), rng.integers(0, dims[-1], size=n))
    return net, batch


@pytest.fixture
def small_problem():
    return random_problem(0)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split()[0])):
            terminalreporter.write_line(line)
