"""Layer primitives for gMLP-family blocks.

All functions take and return :class:`~gmlp.autodiff.Node` values recorded on
one tape. Activations are ``(n, c)`` or batched ``(batch, n, c)``; channel ops
act on the last axis, spatial ops on the token axis (second to last).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor_core as tc
from .autodiff import Node, ops
from .tensor_core import ShapeError

LN_EPS = 1e-6
SPATIAL_INIT_STD = 1e-3


class SguVariant(str, Enum):
    LINEAR = "linear"
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"
    MULTIPLICATIVE_SPLIT = "multiplicative_split"

    def out_channels(self, e: int) -> int:
        return e // 2 if self is SguVariant.MULTIPLICATIVE_SPLIT else e


@dataclass
class SpatialWeights:
    """Parameters of the token-mixing projection ``f(Z) = W Z + b``.

    In ``dense`` mode ``weight`` is the ``(n, n)`` matrix; in ``toeplitz`` mode
    it is the ``(2n - 1,)`` vector of diagonal values. ``bias`` has one entry per
    token and is broadcast over channels.
    """

    mode: str
    weight: Node
    bias: Node

    @property
    def n(self) -> int:
        return self.bias.shape[0]

    def __post_init__(self):
        n = self.bias.shape[0]
        if self.mode == "dense":
            if self.weight.shape != (n, n):
                raise ShapeError(f"dense spatial weight must be ({n}, {n}), got {self.weight.shape}")
        elif self.mode == "toeplitz":
            if self.weight.shape != (2 * n - 1,):
                raise ShapeError(f"toeplitz spatial weight must have {2 * n - 1} entries, got {self.weight.shape}")
        else:
            raise ValueError(f"unknown spatial mode {self.mode!r}")

    def matrix(self) -> Node:
        if self.mode == "toeplitz":
            return ops.toeplitz(self.weight, self.n)
        return self.weight


@dataclass
class TinyAttnWeights:
    qkv: Node       # (d_model, 3 * d_attn), no bias: a key bias cancels in the softmax
    out: Node       # (d_attn, d_out)
    out_bias: Node  # (d_out,)

    @property
    def d_attn(self) -> int:
        return self.out.shape[0]


def init_spatial(n: int, mode: str, rng: np.random.Generator, dtype=np.float64,
                 std: float = SPATIAL_INIT_STD) -> tuple[np.ndarray, np.ndarray]:
    """Near-zero spatial weights and all-ones token bias."""
    shape = (n, n) if mode == "dense" else (2 * n - 1,)
    return rng.normal(0.0, std, size=shape).astype(dtype), np.ones(n, dtype=dtype)


def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = LN_EPS) -> Node:
    """Per-token normalization over channels, population variance."""
    return ops.layer_norm(x, gamma, beta, eps)


def gelu(x: Node) -> Node:
    return ops.gelu(x)


def channel_proj(x: Node, weight: Node, bias: Node | None = None) -> Node:
    return ops.linear(x, weight, bias)


def spatial_proj(z: Node, sw: SpatialWeights) -> Node:
    if z.shape[-2] != sw.n:
        raise ShapeError(f"spatial_proj: {z.shape[-2]} tokens but weights built for n={sw.n}")
    return ops.add_token_bias(ops.spatial(sw.matrix(), z), sw.bias)


def sgu(z: Node, variant: SguVariant | str, sw: SpatialWeights, gamma: Node, beta: Node,
        gate_extra: Node | None = None) -> Node:
    """Spatial gating unit.

    ``gamma``/``beta`` normalize the gate input (``Z2`` for the split variant,
    all of ``Z`` otherwise). ``gate_extra`` is added to the spatial projection
    output before gating; the aMLP block passes tiny attention through here.
    """
    variant = SguVariant(variant)
    if variant is SguVariant.MULTIPLICATIVE_SPLIT:
        if z.shape[-1] % 2:
            raise ShapeError(f"split SGU needs an even channel count, got {z.shape[-1]}")
        bypass, gate_in = ops.split(z, 2)
    else:
        bypass, gate_in = z, z
    gate = spatial_proj(layer_norm(gate_in, gamma, beta), sw)
    if gate_extra is not None:
        gate = ops.add(gate, gate_extra)
    if variant is SguVariant.LINEAR:
        return gate
    if variant is SguVariant.ADDITIVE:
        return ops.add(bypass, gate)
    return ops.mul(bypass, gate)


def tiny_attention(xn: Node, tw: TinyAttnWeights) -> Node:
    """Single-head self-attention without masking or positions.

    ``xn`` is the normalized block input, ``(n, d)`` or ``(batch, n, d)``.
    """
    squeeze = xn.ndim == 2
    if squeeze:
        xn = ops.reshape(xn, (1,) + xn.shape)
    qkv = ops.linear(xn, tw.qkv)
    q, k, v = ops.split(qkv, 3)
    scores = ops.scale(ops.bmm(q, ops.transpose_last2(k)), 1.0 / np.sqrt(tw.d_attn))
    attn = ops.softmax(scores)
    out = ops.linear(ops.bmm(attn, v), tw.out, tw.out_bias)
    if squeeze:
        out = ops.reshape(out, out.shape[1:])
    return out


def attention_weights(xn: np.ndarray, qkv: np.ndarray) -> np.ndarray:
    """Softmax attention map of a tiny-attention module on plain arrays (export helper)."""
    lead = xn.shape[:-1]
    proj = tc.matmul(np.ascontiguousarray(xn.reshape(-1, xn.shape[-1])), qkv)
    q, k, _ = tc.split_last_axis(proj.reshape(lead + (proj.shape[-1],)), 3)
    d_attn = q.shape[-1]
    if q.ndim == 2:
        q, k = q[None], k[None]
    scores = tc.bmm(q, np.ascontiguousarray(np.swapaxes(k, 1, 2))) * (1.0 / np.sqrt(d_attn))
    return tc.softmax_rows(scores)


def stochastic_depth(branch: Node, survival_p: float, mode: str, rng: np.random.Generator | None) -> Node:
    """Drop the whole residual branch with probability ``1 - survival_p``.

    Train mode keeps each example's branch with probability ``survival_p`` and
    rescales kept branches by ``1 / survival_p``; eval mode is the identity.
    A batched branch ``(batch, n, c)`` is dropped per example.
    """
    if not 0.0 < survival_p <= 1.0:
        raise ValueError(f"survival probability must lie in (0, 1], got {survival_p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or survival_p == 1.0:
        return branch
    if rng is None:
        raise ValueError("stochastic_depth in train mode needs an rng")
    n_draws = branch.shape[0] if branch.ndim == 3 else 1
    keep = (rng.random(n_draws) < survival_p).astype(branch.dtype) / survival_p
    factor = np.broadcast_to(keep.reshape((n_draws,) + (1,) * (branch.ndim - 1)), branch.shape)
    return ops.scale(branch, np.ascontiguousarray(factor))


def mixer_token_mlp(x: Node, w1: Node, b1: Node, w2: Node, b2: Node) -> Node:
    """Two-layer MLP along the token axis: ``W2^T gelu(W1^T X + b1) + b2``.

    ``w1`` is ``(n, d_spatial)``, ``w2`` is ``(d_spatial, n)``; biases are
    per hidden unit / per output token and shared over channels.
    """
    n, d_spatial = w1.shape
    if w2.shape != (d_spatial, n) or b1.shape != (d_spatial,) or b2.shape != (n,):
        raise ShapeError(
            f"mixer token MLP shapes do not conform: w1 {w1.shape}, b1 {b1.shape}, w2 {w2.shape}, b2 {b2.shape}"
        )
    if x.shape[-2] != n:
        raise ShapeError(f"mixer token MLP built for n={n}, got input {x.shape}")
    h = gelu(ops.add_token_bias(ops.spatial(ops.transpose_last2(w1), x), b1))
    return ops.add_token_bias(ops.spatial(ops.transpose_last2(w2), h), b2)
