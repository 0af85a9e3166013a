"""numba-compiled kernels; see ``_numpy.py`` for the reference semantics."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def matmul(a, b):
    m, k = a.shape
    p = b.shape[1]
    out = np.zeros((m, p), dtype=a.dtype)
    for i in range(m):
        for kk in range(k):
            aik = a[i, kk]
            for j in range(p):
                out[i, j] += aik * b[kk, j]
    return out


@njit(cache=True)
def bmm(a, b):
    bs, m, k = a.shape
    p = b.shape[2]
    out = np.zeros((bs, m, p), dtype=a.dtype)
    for s in range(bs):
        for i in range(m):
            for kk in range(k):
                aik = a[s, i, kk]
                for j in range(p):
                    out[s, i, j] += aik * b[s, kk, j]
    return out


@njit(cache=True)
def softmax_rows(x):
    m, k = x.shape
    out = np.empty_like(x)
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, k):
            if x[i, j] > mx:
                mx = x[i, j]
        total = 0.0
        for j in range(k):
            e = math.exp(x[i, j] - mx)
            out[i, j] = e
            total += e
        for j in range(k):
            out[i, j] /= total
    return out


@njit(cache=True)
def layer_norm_fwd(x, gamma, beta, eps):
    m, c = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(m, dtype=x.dtype)
    for i in range(m):
        s = 0.0
        for j in range(c):
            s += x[i, j]
        mean = s / c
        v = 0.0
        for j in range(c):
            d = x[i, j] - mean
            v += d * d
        r = 1.0 / math.sqrt(v / c + eps)
        rstd[i] = r
        for j in range(c):
            h = (x[i, j] - mean) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(cache=True)
def layer_norm_bwd(g, xhat, rstd, gamma):
    m, c = xhat.shape
    dx = np.empty_like(xhat)
    dgamma = np.zeros(c, dtype=xhat.dtype)
    dbeta = np.zeros(c, dtype=xhat.dtype)
    for i in range(m):
        sg = 0.0
        sgx = 0.0
        for j in range(c):
            gx = g[i, j] * gamma[j]
            sg += gx
            sgx += gx * xhat[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
        mg = sg / c
        mgx = sgx / c
        for j in range(c):
            dx[i, j] = (g[i, j] * gamma[j] - mg - xhat[i, j] * mgx) * rstd[i]
    return dx, dgamma, dbeta


@njit(cache=True)
def gelu_fwd(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * 0.7071067811865476))
    return out.reshape(x.shape)


@njit(cache=True)
def gelu_bwd(g, x):
    fx = x.ravel()
    fg = g.ravel()
    out = np.empty_like(fx)
    for i in range(fx.size):
        v = fx[i]
        cdf = 0.5 * (1.0 + math.erf(v * 0.7071067811865476))
        pdf = 0.3989422804014327 * math.exp(-0.5 * v * v)
        out[i] = fg[i] * (cdf + v * pdf)
    return out.reshape(x.shape)


@njit(cache=True)
def toeplitz_materialize(w, n):
    out = np.empty((n, n), dtype=w.dtype)
    for i in range(n):
        for j in range(n):
            out[i, j] = w[j - i + n - 1]
    return out


@njit(cache=True)
def toeplitz_adjoint(g):
    n = g.shape[0]
    out = np.zeros(2 * n - 1, dtype=g.dtype)
    for i in range(n):
        for j in range(n):
            out[j - i + n - 1] += g[i, j]
    return out
