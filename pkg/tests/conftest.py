import numpy as np
import pytest


def numeric_grad(fn, x, h=1e-6):
    """Central differences of scalar ``fn(x)`` w.r.t. every element of ``x``.

    Kept deliberately separate from the package's own checker.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = fn(x.copy())
        x[i] = orig - h
        fm = fn(x.copy())
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, n):
    a = np.asarray(a)
    n = np.asarray(n)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)).max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
