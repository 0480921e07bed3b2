"""Post-LN transformer block (single head, GELU feed-forward of width 4e).

Besides plain ``(..., T, e)`` input the block accepts *packed* input: the valid
tokens of a right-padded ``(B, T)`` batch stacked into ``(N, e)``, described by a
:class:`Layout`.  Position-wise work then skips padding; only attention is done
in the padded shape.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .autodiff import (
    Tensor,
    ShapeError,
    add,
    dropout,
    gelu,
    layer_norm,
    masked_attention,
    matmul,
    reshape,
    scatter_rows,
    take_rows,
)
from .optim import xavier_init


class Layout:
    """Map between a ``(B, T)`` validity mask and packed row numbers."""

    def __init__(self, valid: np.ndarray):
        self.valid = np.asarray(valid, dtype=bool)
        self.flat = np.flatnonzero(self.valid.ravel())
        self.row_of = np.full(self.valid.shape, -1, dtype=np.int64)
        self.row_of.ravel()[self.flat] = np.arange(len(self.flat))

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @property
    def n_tokens(self) -> int:
        return len(self.flat)

    def rows(self, batch_idx, pos_idx) -> np.ndarray:
        rows = self.row_of[np.asarray(batch_idx, dtype=np.int64), np.asarray(pos_idx, dtype=np.int64)]
        if (rows < 0).any():
            raise IndexError("requested a padding position")
        return rows

    def unpack(self, x: Tensor) -> Tensor:
        b, t = self.shape
        return reshape(scatter_rows(x, self.flat, b * t), (b, t, x.shape[-1]))

    def pack(self, x: Tensor) -> Tensor:
        b, t = self.shape
        return take_rows(reshape(x, (b * t, x.shape[-1])), self.flat, unique=True)


@dataclass
class BlockWeights:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @classmethod
    def init(cls, width: int, rng: np.random.Generator, ff_mult: int = 4) -> "BlockWeights":
        inner = ff_mult * width

        def w(r, c):
            return Tensor(xavier_init(r, c, rng), requires_grad=True)

        def const(n, value):
            return Tensor(np.full((1, n), value), requires_grad=True)

        return cls(
            wq=w(width, width), bq=const(width, 0.0),
            wk=w(width, width), bk=const(width, 0.0),
            wv=w(width, width), bv=const(width, 0.0),
            wo=w(width, width), bo=const(width, 0.0),
            ln1_g=const(width, 1.0), ln1_b=const(width, 0.0),
            w1=w(width, inner), b1=const(inner, 0.0),
            w2=w(inner, width), b2=const(width, 0.0),
            ln2_g=const(width, 1.0), ln2_b=const(width, 0.0),
        )

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{f.name}", getattr(self, f.name)) for f in fields(self)]


def transformer_block(h: Tensor, wts: BlockWeights, mask: np.ndarray | None,
                      rate: float, rng: np.random.Generator | None,
                      dropout_active: bool, layout: Layout | None = None) -> Tensor:
    """Attention and feed-forward sublayers, each ``LN(x + dropout(sublayer(x)))``.

    With ``layout``, ``h`` is packed ``(N, e)`` and ``mask`` refers to the padded
    ``(B, T, T)`` attention.
    """
    if h.shape[-1] != wts.wq.shape[0]:
        raise ShapeError(f"block width {wts.wq.shape[0]} does not match input {h.shape}")
    q = add(matmul(h, wts.wq), wts.bq)
    k = add(matmul(h, wts.wk), wts.bk)
    v = add(matmul(h, wts.wv), wts.bv)
    if layout is None:
        att = masked_attention(q, k, v, mask)
    else:
        att = layout.pack(masked_attention(layout.unpack(q), layout.unpack(k), layout.unpack(v), mask))
    att = add(matmul(att, wts.wo), wts.bo)
    h = layer_norm(add(h, dropout(att, rate, rng, dropout_active)), wts.ln1_g, wts.ln1_b)
    ff = add(matmul(gelu(add(matmul(h, wts.w1), wts.b1)), wts.w2), wts.b2)
    return layer_norm(add(h, dropout(ff, rate, rng, dropout_active)), wts.ln2_g, wts.ln2_b)
