"""Shared test utilities: finite differences, packing, small oracles."""

import numpy as np


def fd_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function over a flat array."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        up = x.copy()
        dn = x.copy()
        up.flat[i] += h
        dn.flat[i] -= h
        g.flat[i] = (f(up) - f(dn)) / (2 * h)
    return g


def pack(arrays):
    return np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays])


def unpack(vec, shapes):
    out = []
    i = 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(vec[i : i + size].reshape(shape))
        i += size
    return out


def rel_err(approx, exact):
    approx = np.asarray(approx, dtype=float).ravel()
    exact = np.asarray(exact, dtype=float).ravel()
    denom = max(np.linalg.norm(exact), 1e-12)
    return np.linalg.norm(approx - exact) / denom


def random_psd(rng, k, scale=1.0):
    M = rng.standard_normal((k, k))
    return scale * (M @ M.T) / k + 0.1 * np.eye(k)


def quantile_w2_sq_1d(m1, s1, m2, s2, n=2_000_000):
    """Brute-force 1-D squared W2 via the quantile coupling on a fine grid.

    Independent of the closed form: integrates (F1^{-1}(u) - F2^{-1}(u))^2
    with the midpoint rule.
    """
    from scipy.special import ndtri

    u = (np.arange(n) + 0.5) / n
    z = ndtri(u)
    q1 = m1 + s1 * z
    q2 = m2 + s2 * z
    return float(np.mean((q1 - q2) ** 2))
