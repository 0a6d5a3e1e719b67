import numpy as np
import pytest

from infune import tensor as T


def numeric_grad(f, array, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``array`` (in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + h
        up = f()
        array[idx] = old - h
        down = f()
        array[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def check_grads(loss_fn, params, h=1e-5):
    """Max relative error between backprop and finite differences over ``params``."""
    loss = loss_fn()
    grads = T.backward(loss, params)
    worst = 0.0
    for name, p in params.items():
        num = numeric_grad(lambda: float(loss_fn().value), p.value, h)
        worst = max(worst, rel_err(grads[name], num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
