"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``GMLP_DISABLE_NUMBA`` is set to a truthy value. Both modules are
importable directly (``kernels.numpy_impl`` / ``kernels.numba_impl``) for
benchmarks and cross-checks.
"""
import os

from . import _numpy as numpy_impl

try:
    from . import _numba as numba_impl
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba_impl = None

_DISABLED = os.environ.get("GMLP_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

USE_NUMBA = numba_impl is not None and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"

_impl = numba_impl if USE_NUMBA else numpy_impl

matmul = _impl.matmul
bmm = _impl.bmm
softmax_rows = _impl.softmax_rows
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
toeplitz_materialize = _impl.toeplitz_materialize
toeplitz_adjoint = _impl.toeplitz_adjoint

__all__ = [
    "BACKEND",
    "USE_NUMBA",
    "numpy_impl",
    "numba_impl",
    "matmul",
    "bmm",
    "softmax_rows",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "toeplitz_materialize",
    "toeplitz_adjoint",
]
