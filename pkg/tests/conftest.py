import numpy as np
import pytest


def central_diff(loss_fn, arrays, h=1e-5, elements=None, rng=None):
    """Central finite differences of a scalar loss w.r.t. in-place arrays.

    `arrays` is a list of numpy buffers the loss reads; returns one gradient
    array per buffer. When `elements` is set, only that many randomly chosen
    entries per buffer are probed (the rest stay NaN so callers can mask).
    """
    grads = []
    for arr in arrays:
        g = np.full(arr.shape, np.nan)
        flat, gf = arr.reshape(-1), g.reshape(-1)
        if elements is None or elements >= flat.size:
            idx = range(flat.size)
        else:
            idx = rng.choice(flat.size, size=elements, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            gf[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-4):
    """Max elementwise relative error, ignoring unprobed (NaN) entries."""
    mask = ~np.isnan(numeric)
    if not mask.any():
        return 0.0
    a, n = analytic[mask], numeric[mask]
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
