import numpy as np
import pytest

from crossvit import tensor as T
from crossvit.tensor import Tensor, no_grad


def central_diff(fn, arrays, eps=1e-6):
    """Numeric gradient of scalar ``fn(*arrays)`` w.r.t. every array (perturbed in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(*arrays)
            flat[i] = orig - eps
            down = fn(*arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def op_gradient_error(op, arrays, seed=0, eps=1e-6):
    """Max relative error between backprop and central differences for ``sum(op(*xs) * w)``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with no_grad():
        out_shape = op(*[Tensor(a) for a in arrays]).shape
    w = np.random.default_rng(seed).standard_normal(out_shape)

    def scalar(*xs):
        with no_grad():
            return float(np.sum(op(*[Tensor(x) for x in xs]).data * w))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward(T.sum(T.mul(op(*leaves), Tensor(w))))
    numeric = central_diff(scalar, arrays, eps)
    return max(rel_err(leaf.grad, n) for leaf, n in zip(leaves, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> one-line PASS/FAIL verdict, filled in by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
