"""Shared test oracles, independent of the engine's own backward pass."""

import numpy as np


def central_diff(f, arrays, h=1e-5):
    """Central finite-difference gradients of scalar f w.r.t. each array.

    f takes the list of arrays and returns a float; arrays are perturbed one
    entry at a time, so this is deliberately brute force.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(arrays)
            flat[i] = orig - h
            lo = f(arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-6):
    """Elementwise relative error with a floor for near-zero gradients."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def assert_grads_close(analytic, numeric, tol=1e-4):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, float(rel_err(a, n).max()))
    assert worst <= tol, f"gradient mismatch: worst relative error {worst:.3e}"
