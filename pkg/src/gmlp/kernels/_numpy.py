"""Pure-numpy kernels.

Every kernel here has a numba twin in ``_numba.py`` with the same signature and
the same per-element summation order, so the two paths agree bitwise except
where a transcendental (erf, exp) is evaluated by a different library.
"""
import numpy as np
from scipy.special import erf


def matmul(a, b):
    m, k = a.shape
    p = b.shape[1]
    out = np.zeros((m, p), dtype=a.dtype)
    # fixed k-ascending accumulation, independent of BLAS blocking
    for kk in range(k):
        out += a[:, kk, None] * b[None, kk, :]
    return out


def bmm(a, b):
    bs, m, k = a.shape
    p = b.shape[2]
    out = np.zeros((bs, m, p), dtype=a.dtype)
    for kk in range(k):
        out += a[:, :, kk, None] * b[:, None, kk, :]
    return out


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm_fwd(x, gamma, beta, eps):
    c = x.shape[1]
    mean = x.sum(axis=1) / c
    xc = x - mean[:, None]
    var = (xc * xc).sum(axis=1) / c
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gamma + beta, xhat, rstd


def layer_norm_bwd(g, xhat, rstd, gamma):
    c = xhat.shape[1]
    gx = g * gamma
    mean_g = gx.sum(axis=1) / c
    mean_gx = (gx * xhat).sum(axis=1) / c
    dx = (gx - mean_g[:, None] - xhat * mean_gx[:, None]) * rstd[:, None]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    return dx, dgamma, dbeta


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(g, x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def toeplitz_materialize(w, n):
    idx = np.arange(n)
    return np.ascontiguousarray(w[(idx[None, :] - idx[:, None]) + (n - 1)])


def toeplitz_adjoint(g):
    n = g.shape[0]
    out = np.zeros(2 * n - 1, dtype=g.dtype)
    # offset d = j - i; diagonal entries summed in row order
    for d in range(-(n - 1), n):
        out[d + n - 1] = np.diagonal(g, offset=d).sum()
    return out
