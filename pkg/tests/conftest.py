import numpy as np
import pytest

from graphdistill import synth_graph


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_graph():
    """Dense-ish homophilous graph small enough for brute-force oracles."""
    return synth_graph(seed=7, n=24, classes=3, p_in=0.5, p_out=0.1, feature_dim=6)


def finite_difference(fn, arrays, h=1e-5):
    """Central finite-difference gradient of scalar fn w.r.t. each array.

    ``fn`` must recompute the loss from the arrays' current contents; arrays
    are perturbed in place and restored.
    """
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(grad)
    return grads


def relative_error(analytic, numeric, floor=1e-4):
    a, f = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.abs(a) + np.abs(f), floor)
    return float(np.max(np.abs(a - f) / denom)) if a.size else 0.0
