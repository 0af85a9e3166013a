"""Dense row-major tensors and the validated numeric kernels layers are built from.

A tensor here is a C-contiguous ``numpy.ndarray`` of ``float64`` (gradient
checking) or ``float32`` (training). Operations reject shape-incompatible
operands instead of broadcasting; the one exception is a rank-1 bias added to
every row.
"""
from __future__ import annotations

import numpy as np

from . import kernels

Tensor = np.ndarray

FLOAT_DTYPES = (np.dtype(np.float64), np.dtype(np.float32))


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class NonFiniteError(ValueError):
    """Raised when an op that needs finite input receives inf or nan."""


def as_tensor(data, dtype=np.float64) -> Tensor:
    """Return ``data`` as a C-contiguous float tensor of ``dtype``."""
    dtype = np.dtype(dtype)
    if dtype not in FLOAT_DTYPES:
        raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
    return np.ascontiguousarray(data, dtype=dtype)


def zeros(shape, dtype=np.float64) -> Tensor:
    return np.zeros(shape, dtype=dtype)


def _check_same_dtype(*arrays):
    dt = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != dt:
            raise TypeError(f"dtype mismatch: {dt} vs {a.dtype}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for rank-2 operands, summed over k in ascending order."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _check_same_dtype(a, b)
    return kernels.matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a[s] @ b[s]`` over a leading batch axis."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    _check_same_dtype(a, b)
    return kernels.bmm(np.ascontiguousarray(a), np.ascontiguousarray(b))


def add_row_bias(x: Tensor, bias: Tensor) -> Tensor:
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias of shape {bias.shape} does not fit rows of {x.shape}")
    return x + bias


def softmax_rows(x: Tensor) -> Tensor:
    """Max-shifted softmax along the last axis."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("softmax_rows: non-finite input")
    flat = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    return kernels.softmax_rows(flat).reshape(x.shape)


def split_last_axis(x: Tensor, parts: int = 2) -> tuple[Tensor, ...]:
    c = x.shape[-1]
    if c % parts:
        raise ShapeError(f"last extent {c} is not divisible into {parts} parts")
    w = c // parts
    return tuple(np.ascontiguousarray(x[..., i * w:(i + 1) * w]) for i in range(parts))


def concat_last_axis(parts) -> Tensor:
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes differ, {lead} vs {p.shape[:-1]}")
    return np.concatenate(parts, axis=-1)


def toeplitz_materialize(w: Tensor, n: int) -> Tensor:
    """n x n matrix with ``W[i, j] = w[j - i + n - 1]``."""
    if w.ndim != 1 or w.shape[0] != 2 * n - 1:
        raise ShapeError(f"toeplitz: need {2 * n - 1} entries for n={n}, got shape {w.shape}")
    return kernels.toeplitz_materialize(np.ascontiguousarray(w), n)


def toeplitz_adjoint(g: Tensor) -> Tensor:
    """Sum of ``g`` along each diagonal; the adjoint of :func:`toeplitz_materialize`."""
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeError(f"toeplitz adjoint needs a square matrix, got {g.shape}")
    return kernels.toeplitz_adjoint(np.ascontiguousarray(g))
