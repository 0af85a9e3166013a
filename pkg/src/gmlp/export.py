"""Spatial-filter and attention-map export (CSV and 8-bit PGM)."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor_core as tc
from .autodiff import Tape, ops
from .checkpoint import atomic_write
from .layers import attention_weights, layer_norm
from .models import ModelConfig, ParamStore, block_fn


def spatial_matrices(tensors: Mapping[str, np.ndarray]) -> dict[int, np.ndarray]:
    """Materialized ``n x n`` spatial weight per block index."""
    out = {}
    for name, value in tensors.items():
        if name.startswith("blocks/") and name.endswith("/sgu/spatial/weight"):
            idx = int(name.split("/")[1])
            bias = tensors.get(name.replace("/weight", "/bias"))
            if bias is None:
                raise KeyError(name.replace("/weight", "/bias"))
            n = bias.shape[0]
            w = np.asarray(value, dtype=np.float64)
            out[idx] = tc.toeplitz_materialize(w, n) if w.ndim == 1 else w
    return dict(sorted(out.items()))


def matrix_csv(m: np.ndarray) -> str:
    return "\n".join(",".join(f"{v:.9g}" for v in row) for row in np.atleast_2d(m)) + "\n"


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def to_pgm(image: np.ndarray) -> bytes:
    """Binary 8-bit PGM after min-max normalization (a constant image maps to 0)."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(rest[: w * h], dtype=np.uint8).reshape(h, w)


def default_rows(n: int) -> list[int]:
    return sorted({0, n // 4, n // 2, (3 * n) // 4, n - 1})


def dump_filters(tensors: Mapping[str, np.ndarray], out_dir, fmt: str = "csv",
                 rows: list[int] | None = None) -> list[Path]:
    """Write every block's spatial matrix and selected rows; returns written paths."""
    if fmt not in ("csv", "pgm"):
        raise ValueError(f"format must be csv or pgm, got {fmt!r}")
    mats = spatial_matrices(tensors)
    if not mats:
        raise KeyError("blocks/000/sgu/spatial/weight")
    out_dir = Path(out_dir)
    written = []
    for idx, w in mats.items():
        n = w.shape[0]
        sel = default_rows(n) if rows is None else rows
        bad = [r for r in sel if not 0 <= r < n]
        if bad:
            raise ValueError(f"rows {bad} out of range for n={n}")
        path = out_dir / f"block_{idx:03d}_W.csv"
        atomic_write(path, matrix_csv(w))
        written.append(path)
        if fmt == "csv":
            lines = ["row," + ",".join(str(j) for j in range(n))]
            lines += [f"{r}," + ",".join(f"{v:.9g}" for v in w[r]) for r in sel]
            path = out_dir / f"block_{idx:03d}_rows.csv"
            atomic_write(path, "\n".join(lines) + "\n")
            written.append(path)
        else:
            side = math.isqrt(n)
            if side * side != n:
                raise ValueError(f"n={n} is not a square patch grid; use --format csv")
            for r in sel:
                path = out_dir / f"block_{idx:03d}_row_{r:04d}.pgm"
                atomic_write(path, to_pgm(w[r].reshape(side, side)))
                written.append(path)
    return written


def attention_max_map(config: ModelConfig, store: ParamStore, inputs: np.ndarray) -> np.ndarray:
    """Per-example max over layers of tiny-attention weights, ``(batch, n, n)``."""
    if not config.tiny_attn or config.block_type != "gmlp":
        raise ValueError("attention export needs an aMLP config (tiny_attn set)")
    tape = Tape(record=False)
    params = store.bind(tape)
    x = ops.take_rows(params["embed/table"], np.atleast_2d(inputs))
    block = block_fn(config)
    best = None
    for i in range(config.L):
        p = f"blocks/{i:03d}"
        xn = layer_norm(x, params[f"{p}/norm/gamma"], params[f"{p}/norm/beta"])
        a = attention_weights(xn.value, store[f"{p}/attn/qkv/weight"])
        best = a if best is None else np.maximum(best, a)
        scoped = {k[len(p) + 1:]: v for k, v in params.items() if k.startswith(p + "/")}
        x = block(x, scoped, config, "eval", None)
    return best
