"""Tape-based reverse-mode differentiation.

A :class:`Tape` records every :class:`Node` created on it in creation order.
``tape.backward(loss)`` walks that list once, in reverse, accumulating adjoints
additively so a parameter used at several sites (a Toeplitz diagonal, a tied
embedding) receives the sum of its contributions.

Ops take ``Node`` arguments and return a new ``Node``::

    tape = Tape()
    x = tape.param("x", np.array([1.0, 2.0, 3.0]))
    loss = ops.sum(ops.mul(x, x))
    grads = tape.backward(loss)   # {"x": array([2., 4., 6.])}
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from . import tensor_core as tc
from .tensor_core import ShapeError


class TapeError(RuntimeError):
    """Misuse of a tape: re-entrant backward, non-scalar loss, foreign nodes."""


class Node:
    __slots__ = ("value", "tape", "parents", "vjp", "op", "name", "grad", "requires_grad")

    def __init__(self, value, tape, parents=(), vjp=None, op="leaf", name=None, requires_grad=False):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.name = name
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.value.shape})"


class Tape:
    """Eager recording of a forward pass.

    With ``record=False`` nodes are still created but nothing is kept for the
    backward pass; this is the evaluation mode.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self._consumed = False

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise TapeError(f"parameter {name!r} registered twice")
        node = Node(value, self, op="param", name=name, requires_grad=self.record)
        self.params[name] = node
        if self.record:
            self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return Node(value, self, op="const")

    def _emit(self, value, parents, vjp, op) -> Node:
        needs = self.record and any(p.requires_grad for p in parents)
        node = Node(value, self, parents if needs else (), vjp if needs else None, op, requires_grad=needs)
        if needs:
            self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Adjoints of ``loss`` w.r.t. every registered parameter.

        Parameters the loss does not depend on get all-zero gradients.
        """
        if not self.record:
            raise TapeError("backward on a tape created with record=False")
        if self._consumed:
            raise TapeError("backward already ran on this tape")
        if loss.tape is not self:
            raise TapeError("loss node belongs to a different tape")
        if loss.value.shape != ():
            raise TapeError(f"loss must be a scalar, got shape {loss.value.shape}")
        self._consumed = True
        loss.grad = np.ones((), dtype=loss.value.dtype)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            parent_grads = node.vjp(node.grad)
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.value.shape:
                    raise ShapeError(f"{node.op}: adjoint shape {g.shape} != value shape {parent.value.shape}")
                parent.grad = g if parent.grad is None else parent.grad + g
            if node.op != "param":
                node.grad = None
        return {
            name: (node.grad if node.grad is not None else np.zeros_like(node.value))
            for name, node in self.params.items()
        }


def _tape_of(*nodes) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise TapeError("operands recorded on different tapes")
    return tape


# ---------------------------------------------------------------------------
# op catalog
# ---------------------------------------------------------------------------


def _unbroadcast_rows(g, shape):
    """Sum a row-broadcast adjoint back down to a rank-1 bias."""
    return g.reshape(-1, shape[0]).sum(axis=0)


class ops:
    """Namespace of differentiable operations."""

    @staticmethod
    def add(a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return _tape_of(a, b)._emit(a.value + b.value, (a, b), lambda g: (g, g), "add")

    @staticmethod
    def sub(a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
        return _tape_of(a, b)._emit(a.value - b.value, (a, b), lambda g: (g, -g), "sub")

    @staticmethod
    def mul(a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        av, bv = a.value, b.value
        return _tape_of(a, b)._emit(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")

    @staticmethod
    def scale(a: Node, factor) -> Node:
        """Multiply by a constant scalar or a constant array of ``a``'s shape."""
        factor = np.asarray(factor, dtype=a.dtype)
        if factor.ndim and factor.shape != a.shape:
            raise ShapeError(f"scale: factor {factor.shape} does not match {a.shape}")
        return a.tape._emit(a.value * factor, (a,), lambda g: (g * factor,), "scale")

    @staticmethod
    def add_bias(x: Node, bias: Node) -> Node:
        """Rank-1 ``bias`` added to every row (last axis) of ``x``."""
        out = tc.add_row_bias(x.value, bias.value)
        return _tape_of(x, bias)._emit(out, (x, bias), lambda g: (g, _unbroadcast_rows(g, bias.shape)), "add_bias")

    @staticmethod
    def sum(x: Node) -> Node:
        shape = x.shape
        return x.tape._emit(np.asarray(x.value.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")

    @staticmethod
    def mean_axis(x: Node, axis: int) -> Node:
        shape = x.shape
        axis = axis % len(shape)
        k = shape[axis]

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, axis) / k, shape).copy(),)

        return x.tape._emit(x.value.sum(axis=axis) / k, (x,), vjp, "mean_axis")

    @staticmethod
    def reshape(x: Node, shape) -> Node:
        old = x.shape
        return x.tape._emit(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")

    @staticmethod
    def transpose_last2(x: Node) -> Node:
        out = np.ascontiguousarray(np.swapaxes(x.value, -1, -2))
        return x.tape._emit(out, (x,), lambda g: (np.ascontiguousarray(np.swapaxes(g, -1, -2)),), "transpose")

    @staticmethod
    def permute(x: Node, axes) -> Node:
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out = np.ascontiguousarray(x.value.transpose(axes))
        return x.tape._emit(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "permute")

    @staticmethod
    def matmul(a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        out = tc.matmul(av, bv)

        def vjp(g):
            return tc.matmul(g, np.ascontiguousarray(bv.T)), tc.matmul(np.ascontiguousarray(av.T), g)

        return _tape_of(a, b)._emit(out, (a, b), vjp, "matmul")

    @staticmethod
    def bmm(a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        out = tc.bmm(av, bv)

        def vjp(g):
            return (
                tc.bmm(g, np.ascontiguousarray(np.swapaxes(bv, 1, 2))),
                tc.bmm(np.ascontiguousarray(np.swapaxes(av, 1, 2)), g),
            )

        return _tape_of(a, b)._emit(out, (a, b), vjp, "bmm")

    @staticmethod
    def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
        """Projection along the last axis: ``x @ weight (+ bias)`` for any leading shape."""
        a, b = weight.shape
        if x.shape[-1] != a:
            raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
        lead = x.shape[:-1]
        x2 = x.value.reshape(-1, a)
        out = tc.matmul(x2, weight.value)
        if bias is not None:
            out = tc.add_row_bias(out, bias.value)
        out = out.reshape(lead + (b,))
        wv = weight.value

        def vjp(g):
            g2 = g.reshape(-1, b)
            dx = tc.matmul(g2, np.ascontiguousarray(wv.T)).reshape(lead + (a,))
            dw = tc.matmul(np.ascontiguousarray(x2.T), g2)
            if bias is None:
                return dx, dw
            return dx, dw, g2.sum(axis=0)

        parents = (x, weight) if bias is None else (x, weight, bias)
        return _tape_of(*parents)._emit(out, parents, vjp, "linear")

    @staticmethod
    def spatial(weight: Node, z: Node) -> Node:
        """``weight @ z`` along the token axis, shared over channels.

        ``z`` is ``(n, c)`` or ``(batch, n, c)``; ``weight`` is ``(m, n)``.
        """
        m, n = weight.shape
        if z.shape[-2] != n:
            raise ShapeError(f"spatial: weight {weight.shape} does not fit tokens of {z.shape}")
        batched = z.ndim == 3
        if batched:
            bs, _, c = z.shape
            zt = np.ascontiguousarray(z.value.transpose(1, 0, 2)).reshape(n, bs * c)
        else:
            zt = z.value
        out = tc.matmul(weight.value, zt)
        wv = weight.value

        def unfold(t):
            rows = t.shape[0]
            return np.ascontiguousarray(t.reshape(rows, bs, c).transpose(1, 0, 2)) if batched else t

        def vjp(g):
            gt = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(m, bs * c) if batched else g
            dw = tc.matmul(gt, np.ascontiguousarray(zt.T))
            dz = tc.matmul(np.ascontiguousarray(wv.T), gt)
            return dw, unfold(dz)

        return _tape_of(weight, z)._emit(unfold(out), (weight, z), vjp, "spatial")

    @staticmethod
    def add_token_bias(x: Node, bias: Node) -> Node:
        """Add ``bias[i]`` to every channel of token ``i``; ``x`` is ``(..., n, c)``."""
        n = bias.shape[0]
        if bias.ndim != 1 or x.shape[-2] != n:
            raise ShapeError(f"token bias {bias.shape} does not fit tokens of {x.shape}")
        out = x.value + bias.value[:, None]

        def vjp(g):
            return g, g.reshape(-1, n, g.shape[-1]).sum(axis=(0, 2))

        return _tape_of(x, bias)._emit(out, (x, bias), vjp, "add_token_bias")

    @staticmethod
    def toeplitz(w: Node, n: int) -> Node:
        return w.tape._emit(tc.toeplitz_materialize(w.value, n), (w,), lambda g: (tc.toeplitz_adjoint(g),), "toeplitz")

    @staticmethod
    def gelu(x: Node) -> Node:
        xv = x.value
        return x.tape._emit(kernels.gelu_fwd(xv), (x,), lambda g: (kernels.gelu_bwd(np.ascontiguousarray(g), xv),), "gelu")

    @staticmethod
    def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-6) -> Node:
        c = x.shape[-1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not fit {x.shape}")
        shape = x.shape
        x2 = np.ascontiguousarray(x.value).reshape(-1, c)
        gv = gamma.value
        y, xhat, rstd = kernels.layer_norm_fwd(x2, gv, beta.value, eps)

        def vjp(g):
            dx, dg, db = kernels.layer_norm_bwd(np.ascontiguousarray(g).reshape(-1, c), xhat, rstd, gv)
            return dx.reshape(shape), dg, db

        return _tape_of(x, gamma, beta)._emit(y.reshape(shape), (x, gamma, beta), vjp, "layer_norm")

    @staticmethod
    def softmax(x: Node) -> Node:
        """Softmax along the last axis."""
        y = tc.softmax_rows(x.value)

        def vjp(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return x.tape._emit(y, (x,), vjp, "softmax")

    @staticmethod
    def split(x: Node, parts: int = 2) -> tuple[Node, ...]:
        pieces = tc.split_last_axis(x.value, parts)
        w = pieces[0].shape[-1]
        out = []
        for i, piece in enumerate(pieces):
            def vjp(g, i=i):
                full = np.zeros(x.shape, dtype=x.dtype)
                full[..., i * w:(i + 1) * w] = g
                return (full,)
            out.append(x.tape._emit(piece, (x,), vjp, "split"))
        return tuple(out)

    @staticmethod
    def concat(parts) -> Node:
        parts = tuple(parts)
        widths = np.cumsum([0] + [p.shape[-1] for p in parts])
        out = tc.concat_last_axis([p.value for p in parts])

        def vjp(g):
            return tuple(np.ascontiguousarray(g[..., widths[i]:widths[i + 1]]) for i in range(len(parts)))

        return _tape_of(*parts)._emit(out, parts, vjp, "concat")

    @staticmethod
    def take_rows(table: Node, ids: np.ndarray) -> Node:
        """Gather ``table[ids]`` (embedding lookup); adjoint scatter-adds in index order."""
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise IndexError(f"ids out of range for table with {table.shape[0]} rows")
        out = table.value[ids]

        def vjp(g):
            full = np.zeros(table.shape, dtype=table.dtype)
            np.add.at(full, ids.ravel(), g.reshape(-1, table.shape[1]))
            return (full,)

        return table.tape._emit(out, (table,), vjp, "take_rows")

    @staticmethod
    def cross_entropy(logits: Node, targets: np.ndarray) -> Node:
        """Mean softmax cross entropy of ``(m, k)`` logits against integer targets."""
        targets = np.asarray(targets)
        m, k = logits.shape
        if targets.shape != (m,):
            raise ShapeError(f"cross_entropy: {m} rows but targets of shape {targets.shape}")
        probs = tc.softmax_rows(logits.value)
        rows = np.arange(m)
        shifted = logits.value - logits.value.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        loss = (logz - shifted[rows, targets]).sum() / m

        def vjp(g):
            d = probs.copy()
            d[rows, targets] -= 1.0
            return (d * (g / m),)

        return logits.tape._emit(np.asarray(loss, dtype=logits.dtype), (logits,), vjp, "cross_entropy")


# ---------------------------------------------------------------------------
# finite differences and gradient checking
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


@dataclass
class GradCheckRow:
    name: str
    shape: tuple
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    label: str
    tol: float
    rows: list[GradCheckRow]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.rows), default=0.0)

    def format(self) -> str:
        lines = [f"{'op':<28} {'tensor':<22} {'shape':<16} {'max rel err':>12}  result"]
        for r in self.rows:
            lines.append(
                f"{self.label:<28} {r.name:<22} {str(r.shape):<16} {r.max_rel_err:>12.3e}  {'PASS' if r.passed else 'FAIL'}"
            )
        return "\n".join(lines)


LossFn = Callable[[Tape, dict], Node]


def gradient_check(fn: LossFn, params: dict[str, np.ndarray], tol: float = 1e-5,
                   eps: float = 1e-5, label: str = "fn") -> GradCheckReport:
    """Compare tape adjoints of ``fn`` against central differences.

    ``fn(tape, nodes)`` builds a scalar loss from ``nodes`` (one parameter node
    per entry of ``params``). Everything runs in float64.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    nodes = {k: tape.param(k, v) for k, v in params.items()}
    analytic = tape.backward(fn(tape, nodes))

    rows = []
    for name, value in params.items():
        def f(x, name=name):
            t = Tape(record=False)
            local = {k: t.param(k, x if k == name else v) for k, v in params.items()}
            return float(fn(t, local).value)

        numeric = finite_diff_grad(f, value, eps)
        err = float(relative_error(analytic[name], numeric).max()) if value.size else 0.0
        rows.append(GradCheckRow(name, tuple(value.shape), err, err <= tol))
    return GradCheckReport(label, tol, rows)
