import numpy as np
import pytest

from podnn import autodiff as ad


def numeric_grad(f, arr, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. array ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_grads(build, params, h=1e-5):
    """Compare tape gradients of ``build()`` (a scalar Tensor) with finite differences.

    Returns the worst relative error over all params.
    """
    with ad.Tape() as tape:
        loss = build()
    analytic = ad.backward(tape, loss, params)

    def f():
        return float(build().data)

    worst = 0.0
    for p in params:
        num = numeric_grad(f, p.data, h)
        worst = max(worst, rel_error(analytic[p], num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
