"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--train-steps 50]

Kernel timings call both implementations directly. The end-to-end row runs a
short micro training job in a subprocess per backend, selected with
GMLP_DISABLE_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from gmlp import kernels


def best_of(fn, repeat):
    fn()  # warm-up (JIT compile for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    a, b = rng.normal(size=(512, 64)), rng.normal(size=(64, 128))
    ba, bb = rng.normal(size=(32, 16, 16)), rng.normal(size=(32, 16, 32))
    x = rng.normal(size=(512, 64))
    g, beta = np.ones(64), np.zeros(64)
    w = rng.normal(size=2 * 256 - 1)
    sq = rng.normal(size=(256, 256))
    return {
        "matmul 512x64 @ 64x128": lambda k: k.matmul(a, b),
        "bmm 32x(16x16 @ 16x32)": lambda k: k.bmm(ba, bb),
        "softmax_rows 512x64": lambda k: k.softmax_rows(x),
        "layer_norm_fwd 512x64": lambda k: k.layer_norm_fwd(x, g, beta, 1e-6),
        "gelu_fwd 512x64": lambda k: k.gelu_fwd(x),
        "gelu_bwd 512x64": lambda k: k.gelu_bwd(x, x),
        "toeplitz_materialize n=256": lambda k: k.toeplitz_materialize(w, 256),
        "toeplitz_adjoint n=256": lambda k: k.toeplitz_adjoint(sq),
    }


TRAIN_SNIPPET = """
import time
from gmlp import kernels
from gmlp.models import ModelConfig
from gmlp.training import DESK_TRAIN, train
tc = DESK_TRAIN.replace(total_steps={steps}, warmup_steps=1, eval_every={steps})
train(ModelConfig(), "copy_shift_1", tc.replace(total_steps=1, eval_every=1))  # warm-up
t0 = time.perf_counter()
train(ModelConfig(), "copy_shift_1", tc)
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def train_time(disable_numba, steps):
    env = dict(os.environ, GMLP_DISABLE_NUMBA="1" if disable_numba else "0")
    out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True)
    backend, seconds = out.stdout.split()
    return backend, float(seconds)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--train-steps", type=int, default=50)
    args = parser.parse_args()
    if kernels.numba_impl is None:
        sys.exit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<30} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, fn in kernel_cases(rng).items():
        t_np = best_of(lambda: fn(kernels.numpy_impl), args.repeat)
        t_nb = best_of(lambda: fn(kernels.numba_impl), args.repeat)
        print(f"{name:<30} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>7.1f}x")

    if args.train_steps > 0:
        _, t_np = train_time(True, args.train_steps)
        _, t_nb = train_time(False, args.train_steps)
        label = f"micro train, {args.train_steps} steps"
        print(f"{label:<30} {t_np * 1e3:>10.1f} {t_nb * 1e3:>10.1f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
