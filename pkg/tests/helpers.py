"""Shared oracles for the test suite: finite differences and naive references."""

import numpy as np


def fd_gradient(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar f() wrt array x, mutated in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def fd_gradient_sampled(f, x: np.ndarray, idx, h: float = 1e-4) -> np.ndarray:
    """Central differences at a chosen subset of flat indices."""
    flat = x.reshape(-1)
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out


def assert_grads_close(analytic, numeric, rtol=1e-3, atol=1e-6):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def naive_conv2d(x, k, stride=1, padding=0):
    """Six-nested-loop cross-correlation oracle."""
    c, h, w = x.shape
    c2, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h2 = (h + 2 * padding - kh) // stride + 1
    w2 = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((c2, h2, w2))
    for o in range(c2):
        for i in range(h2):
            for j in range(w2):
                acc = 0.0
                for ci in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += xp[ci, i * stride + di, j * stride + dj] * k[o, ci, di, dj]
                out[o, i, j] = acc
    return out
