"""Small reverse-mode differentiation engine over numpy arrays.

Values are float64 ndarrays of any rank; the attention/transformer code works on
batched ``(batch, length, width)`` tensors and 2-D weights.  Every primitive that
touches a tensor requiring gradients while a :class:`Tape` is active (per thread)
appends one node to that tape.  Creation order is a topological order, so replaying the tape
in reverse visits every node after all of its consumers.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "MaskError",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take_rows",
    "scatter_rows",
    "embedding",
    "row_softmax",
    "log_softmax",
    "cross_entropy",
    "layer_norm",
    "gelu",
    "dropout",
    "masked_attention",
    "sum_all",
]

LN_EPS = 1e-12

_local = threading.local()


def _tapes() -> list["Tape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class MaskError(ValueError):
    """An attention mask leaves a query with no permitted key."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # never in place: ``g`` may be shared with another consumer's gradient
        self.grad = g if self.grad is None else self.grad + g

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records primitives executed inside ``with Tape() as tape:``."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes().remove(self)

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        # intermediate gradients are per-pass; leaves keep accumulating
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tapes = _tapes()
    if tapes and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tapes[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _send(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t._accumulate(_unbroadcast(g, t.shape))


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def backward(g):
        _send(a, g)
        _send(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def backward(g):
        _send(a, g)
        _send(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def backward(g):
        _send(a, g * b.data)
        _send(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _send(a, g * c)

    return _make(a.data * c, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.data.ndim == 2 and a.data.ndim > 2:
        # (..., n) @ (n, m): one 2-D product instead of a stacked one
        a2 = a.data.reshape(-1, a.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a2.T @ g2)

        return _make((a2 @ b.data).reshape(*a.shape[:-1], b.shape[-1]), (a, b), backward)

    def backward(g):
        if a.requires_grad:
            _send(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _send(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        _send(a, np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        _send(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, sizes, axis=axis)):
            _send(p, piece)

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def take_rows(a: Tensor, index, unique: bool = False) -> Tensor:
    """``a[index]`` along the first axis (any index shape); scatter-adds on backward.

    ``unique`` promises no repeated index so the backward can assign directly.
    """
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            if unique:
                full[index] = g
            else:
                np.add.at(full, index, g)
            a._accumulate(full)

    return _make(a.data[index], (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for embedding table with {table.shape[0]} rows")
    return take_rows(table, ids)


def scatter_rows(a: Tensor, index, n_rows: int) -> Tensor:
    """Rows of ``a`` placed at ``index`` in an ``n_rows`` zero matrix (inverse of take_rows)."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_rows, *a.shape[1:]))
    out[index] = a.data

    def backward(g):
        _send(a, g[index])

    return _make(out, (a,), backward)


def row_softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.  ``mask`` (broadcastable, True = permitted)
    sends excluded entries to probability zero."""
    x = tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise MaskError("attention mask leaves a query row with no permitted key")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    y = np.exp(z)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        _send(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), backward)


def log_softmax(x) -> Tensor:
    x = tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        _send(x, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under row-softmax of 2-D ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (N, V) logits and (N,) targets, got {logits.shape}, {targets.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(len(targets))
    loss = -logp[rows, targets].sum()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        _send(logits, grad * g)

    return _make(np.asarray(loss), (logits,), backward)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = tensor(x), tensor(gain), tensor(bias)
    if gain.data.size != x.shape[-1] or bias.data.size != x.shape[-1]:
        raise ShapeError(f"layer_norm gain/bias size must equal {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.data.reshape(-1)
    out = xhat * gv + bias.data.reshape(-1)

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(
                (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0).reshape(gain.shape))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0).reshape(bias.shape))
        if x.requires_grad:
            gx = g * gv
            x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gain, bias), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh form: ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``."""
    x = tensor(x)
    xd = x.data
    th = np.tanh(_GELU_C * (xd + 0.044715 * xd * xd * xd))

    def backward(g):
        dth = (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        _send(x, g * (0.5 * (1.0 + th) + 0.5 * xd * dth))

    return _make(0.5 * xd * (1.0 + th), (x,), backward)


def dropout(x, rate: float, rng: np.random.Generator | None, active: bool) -> Tensor:
    """Inverted dropout; identity when inactive or ``rate == 0``."""
    x = tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        _send(x, g * keep)

    return _make(x.data * keep, (x,), backward)


def masked_attention(q, k, v, mask: np.ndarray | None = None) -> Tensor:
    """Single-head scaled dot-product attention.  ``mask`` is boolean,
    broadcastable to ``(..., q_len, k_len)``; True marks a permitted key."""
    q, k, v = tensor(q), tensor(k), tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(row_softmax(scores, mask), v)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        _send(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), (x,), backward)
