import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from grl.tensor import Tape, Tensor, backward  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def analytic_grads(fn, inputs, weights):
    """Gradient of sum(fn(*inputs) * weights) w.r.t. every input, via the tape."""
    ts = [Tensor(x, requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn(*ts)
        loss = (out * Tensor(weights)).sum()
    backward(loss, tape, ts)
    return [t.grad for t in ts]


def jvp_check(fn, inputs, n_dirs=10, eps=1e-6, seed=0):
    """Largest relative error between tape JVPs and central differences over random directions."""
    r = np.random.default_rng(seed)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    weights = r.standard_normal(np.shape(fn(*[Tensor(x) for x in inputs]).data))
    grads = analytic_grads(fn, inputs, weights)

    def f(xs):
        return float(np.sum(fn(*[Tensor(x) for x in xs]).data * weights))

    worst = 0.0
    for _ in range(n_dirs):
        dirs = [r.standard_normal(x.shape) for x in inputs]
        ana = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        plus = f([x + eps * d for x, d in zip(inputs, dirs)])
        minus = f([x - eps * d for x, d in zip(inputs, dirs)])
        num = (plus - minus) / (2 * eps)
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
