"""Shared encoder, item-wise corrector and masked-item recommender.

Item embeddings ``E`` (one row per id, specials included) and the position table
are single instances used by all three parts.  Position row ``t`` holds the
embedding of 1-based position ``t``; row 0 is unused.  Batches are padded on the
right with ``pad_id`` and padded keys are excluded from attention.

Internally hidden states are *packed*: only the valid tokens, stacked row-major
into ``(N, e)`` and described by a :class:`Layout`.  The ``*_packed`` functions
work in that form; ``encode`` and ``generator_hidden`` return the padded view.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    dropout,
    embedding,
    matmul,
    reshape,
    row_softmax,
    take_rows,
    transpose,
)
from .data import Op, Vocab, apply_operations
from .layers import BlockWeights, Layout, transformer_block
from .optim import xavier_init

OP_SETS = {
    "full": (Op.KEEP, Op.DELETE, Op.INSERT),
    "delete_keep": (Op.KEEP, Op.DELETE),
    "insert_keep": (Op.KEEP, Op.INSERT),
}


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    heads: int = 1
    layers_encoder: int = 1
    layers_corrector: int = 1
    layers_recommender: int = 1
    dropout: float = 0.5
    max_raw_len: int = 50
    max_corrected_len: int = 60
    max_insert_decode: int = 5
    position_rows: int = 0  # 0 -> max_corrected_len + 2

    def __post_init__(self):
        if self.heads != 1:
            raise ValueError("only single-head attention is implemented")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.max_corrected_len < self.max_raw_len:
            raise ValueError("max_corrected_len must be >= max_raw_len")
        if self.position_rows == 0:
            object.__setattr__(self, "position_rows", self.max_corrected_len + 2)
        if self.position_rows < self.max_corrected_len + 2:
            raise ValueError("position_rows must cover max_corrected_len plus the mask slot")


@dataclass
class ModelParameters:
    item_emb: Tensor
    pos_emb: Tensor
    op_proj: Tensor
    encoder: list[BlockWeights] = field(default_factory=list)
    generator: list[BlockWeights] = field(default_factory=list)
    recommender: list[BlockWeights] = field(default_factory=list)

    @classmethod
    def init(cls, cfg: ModelConfig, vocab: Vocab, rng: np.random.Generator) -> "ModelParameters":
        e = cfg.embed_dim

        def w(r, c):
            return Tensor(xavier_init(r, c, rng), requires_grad=True)

        return cls(
            item_emb=w(vocab.total_rows, e),
            pos_emb=w(cfg.position_rows, e),
            op_proj=w(3, e),
            encoder=[BlockWeights.init(e, rng) for _ in range(cfg.layers_encoder)],
            generator=[BlockWeights.init(e, rng) for _ in range(cfg.layers_corrector)],
            recommender=[BlockWeights.init(e, rng) for _ in range(cfg.layers_recommender)],
        )

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("item_emb", self.item_emb), ("pos_emb", self.pos_emb), ("op_proj", self.op_proj)]
        for stack in ("encoder", "generator", "recommender"):
            for i, blk in enumerate(getattr(self, stack)):
                out.extend(blk.named(f"{stack}.{i}"))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def copy(self) -> "ModelParameters":
        clone = ModelParameters.__new__(ModelParameters)
        memo = {id(t): Tensor(t.data.copy(), requires_grad=True) for t in self.tensors()}
        clone.item_emb, clone.pos_emb, clone.op_proj = (
            memo[id(self.item_emb)], memo[id(self.pos_emb)], memo[id(self.op_proj)])
        for stack in ("encoder", "generator", "recommender"):
            blocks = []
            for blk in getattr(self, stack):
                blocks.append(BlockWeights(**{name.rsplit(".", 1)[1]: memo[id(t)]
                                              for name, t in blk.named("_")}))
            setattr(clone, stack, blocks)
        return clone


# ------------------------------------------------------------------ helpers


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to ``(B, T)`` ids plus a boolean validity mask."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    valid = np.zeros((len(seqs), width), dtype=bool)
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = s
        valid[b, :len(s)] = True
    return ids, valid


def _output_logits(hidden: Tensor, params: ModelParameters) -> Tensor:
    """Scores against every embedding row: ``h E^T``."""
    return matmul(hidden, transpose(params.item_emb))


# ------------------------------------------------------------------ encoder


def encode_packed(ids: np.ndarray, valid: np.ndarray, params: ModelParameters, cfg: ModelConfig,
                  rng: np.random.Generator | None = None,
                  dropout_active: bool = False) -> tuple[Tensor, Layout]:
    """``(B, T)`` ids -> packed ``(N, e)`` encoder states and their layout."""
    t = ids.shape[1]
    if t > cfg.position_rows - 1:
        raise SequenceTooLong(f"sequence length {t} exceeds the limit of {cfg.position_rows - 1}")
    layout = Layout(valid)
    _, ti = np.nonzero(layout.valid)
    h = add(embedding(params.item_emb, ids[layout.valid]), take_rows(params.pos_emb, ti + 1))
    h = dropout(h, cfg.dropout, rng, dropout_active)
    mask = layout.valid[:, None, :]
    for blk in params.encoder:
        h = transformer_block(h, blk, mask, cfg.dropout, rng, dropout_active, layout)
    return h, layout


def encode(ids: np.ndarray, valid: np.ndarray, params: ModelParameters, cfg: ModelConfig,
           rng: np.random.Generator | None = None, dropout_active: bool = False) -> Tensor:
    """``(B, T)`` ids -> ``(B, T, e)`` hidden states; padding rows are zero."""
    h, layout = encode_packed(ids, valid, params, cfg, rng, dropout_active)
    return layout.unpack(h)


def operation_logits(h: Tensor, params: ModelParameters) -> Tensor:
    return matmul(h, transpose(params.op_proj))


def predict_operations(h: Tensor, params: ModelParameters) -> np.ndarray:
    """Per-position distribution over (keep, delete, insert)."""
    return row_softmax(operation_logits(h, params)).data


# ---------------------------------------------------------------- generator


def generator_packed(anchor: Tensor, prefix: np.ndarray, prefix_valid: np.ndarray,
                     params: ModelParameters, cfg: ModelConfig,
                     rng: np.random.Generator | None = None,
                     dropout_active: bool = False) -> tuple[Tensor, Layout]:
    """Reverse generator over ``N`` anchors.

    ``anchor`` is ``(N, e)``; ``prefix`` is ``(N, n)`` already-generated ids.  Row 0 of
    the input is ``anchor + p_1`` and row ``j`` is ``E[prefix_j] + p_{j+1}``; a causal
    mask lets output row ``j`` see rows ``0..j``.
    """
    n_anchor, n = prefix.shape
    if n > cfg.max_insert_decode:
        raise SequenceTooLong(f"insertion prefix {n} exceeds max_insert_decode={cfg.max_insert_decode}")
    valid = np.concatenate([np.ones((n_anchor, 1), dtype=bool), np.asarray(prefix_valid, dtype=bool)],
                           axis=1)
    layout = Layout(valid)
    pb, pt = np.nonzero(valid[:, 1:])
    # packed order interleaves anchors and prefix items; gather them into place
    src = np.empty(layout.n_tokens, dtype=np.int64)
    src[layout.row_of[:, 0]] = np.arange(n_anchor)
    src[layout.row_of[pb, pt + 1]] = n_anchor + np.arange(len(pb))
    parts = [anchor]
    if len(pb):
        parts.append(embedding(params.item_emb, prefix[pb, pt]))
    x = take_rows(concat(parts, axis=0), src, unique=True)
    _, ti = np.nonzero(valid)
    h = add(x, take_rows(params.pos_emb, ti + 1))
    h = dropout(h, cfg.dropout, rng, dropout_active)
    causal = np.tril(np.ones((n + 1, n + 1), dtype=bool))
    mask = causal[None, :, :] & valid[:, None, :]
    for blk in params.generator:
        h = transformer_block(h, blk, mask, cfg.dropout, rng, dropout_active, layout)
    return h, layout


def generator_hidden(anchor: Tensor, prefix: np.ndarray, prefix_valid: np.ndarray,
                     params: ModelParameters, cfg: ModelConfig,
                     rng: np.random.Generator | None = None,
                     dropout_active: bool = False) -> Tensor:
    """Padded ``(N, n + 1, e)`` view of :func:`generator_packed`."""
    h, layout = generator_packed(anchor, prefix, prefix_valid, params, cfg, rng, dropout_active)
    return layout.unpack(h)


def generator_step_distributions(anchor_hidden: np.ndarray, prefix: Sequence[int],
                                 params: ModelParameters, cfg: ModelConfig) -> np.ndarray:
    """``(len(prefix) + 1, total_rows)``: row ``n`` predicts the ``(n+1)``-th inserted item."""
    ids = np.asarray([list(prefix)], dtype=np.int64).reshape(1, len(prefix))
    h = generator_hidden(Tensor(np.asarray(anchor_hidden)[None, :]), ids,
                         np.ones_like(ids, dtype=bool), params, cfg)
    return row_softmax(_output_logits(h, params)).data[0]


def decode_insertions(anchors: np.ndarray, params: ModelParameters, cfg: ModelConfig,
                      vocab: Vocab) -> list[list[int]]:
    """Greedy decoding for a batch of anchors; pad and mask rows are never emitted."""
    n_anchor = len(anchors)
    out: list[list[int]] = [[] for _ in range(n_anchor)]
    if n_anchor == 0:
        return out
    banned = [vocab.pad_id, vocab.mask_id]
    live = np.arange(n_anchor)
    prefix = np.zeros((n_anchor, 0), dtype=np.int64)
    for _ in range(cfg.max_insert_decode):
        h, layout = generator_packed(Tensor(anchors[live]), prefix, np.ones_like(prefix, dtype=bool),
                                     params, cfg)
        last = layout.rows(np.arange(len(live)), prefix.shape[1])
        logits = h.data[last] @ params.item_emb.data.T
        logits[:, banned] = -np.inf
        nxt = logits.argmax(axis=1)
        going = nxt != vocab.eos_id
        for a, item in zip(live[going], nxt[going]):
            out[a].append(int(item))
        live, prefix = live[going], np.concatenate([prefix[going], nxt[going, None]], axis=1)
        if not len(live):
            break
    return out


def decode_insertion(anchor_hidden: np.ndarray, params: ModelParameters, cfg: ModelConfig,
                     vocab: Vocab) -> list[int]:
    return decode_insertions(np.asarray(anchor_hidden)[None, :], params, cfg, vocab)[0]


# --------------------------------------------------------------- correction


@dataclass
class CorrectionLog:
    labels: list[int]
    insertions: dict[int, list[int]]

    @property
    def changed(self) -> bool:
        return any(op != Op.KEEP for op in self.labels)


def correct_batch(seqs: Sequence[Sequence[int]], params: ModelParameters, cfg: ModelConfig,
                  vocab: Vocab, op_set: str = "full",
                  force_label: int | None = None) -> list[tuple[list[int], CorrectionLog]]:
    """One correction pass per sequence, inference mode.

    ``op_set`` limits the argmax to a label subset; ``force_label`` overrides the
    argmax for every position (test hook).
    """
    if any(len(s) == 0 for s in seqs):
        raise ValueError("cannot correct an empty sequence")
    if not seqs:
        return []
    ids, valid = pad_batch(seqs, vocab.pad_id)
    h, layout = encode_packed(ids, valid, params, cfg)
    labels = np.full(ids.shape, -1, dtype=np.int64)
    if force_label is not None:
        labels[valid] = int(force_label)
    else:
        logits = operation_logits(h, params).data
        allowed = np.zeros(3, dtype=bool)
        allowed[list(OP_SETS[op_set])] = True
        labels[valid] = np.where(allowed, logits, -np.inf).argmax(axis=-1)
    for b, s in enumerate(seqs):
        # never delete everything: the last item survives an all-delete verdict
        if (labels[b, :len(s)] == Op.DELETE).all():
            labels[b, len(s) - 1] = Op.KEEP
    bi, ti = np.nonzero((labels == Op.INSERT) & valid)
    generated = decode_insertions(h.data[layout.rows(bi, ti)], params, cfg, vocab)
    per_seq: list[dict[int, list[int]]] = [{} for _ in seqs]
    for b, t, g in zip(bi, ti, generated):
        per_seq[b][int(t)] = g
    results = []
    for b, s in enumerate(seqs):
        lab = [int(x) for x in labels[b, :len(s)]]
        fixed = apply_operations(s, lab, per_seq[b])[-cfg.max_corrected_len:]
        results.append((fixed, CorrectionLog(lab, per_seq[b])))
    return results


def correct_sequence(raw: Sequence[int], params: ModelParameters, cfg: ModelConfig, vocab: Vocab,
                     op_set: str = "full", force_label: int | None = None):
    return correct_batch([raw], params, cfg, vocab, op_set, force_label)[0]


# -------------------------------------------------------------- recommender


def recommender_packed(h: Tensor, layout: Layout, params: ModelParameters, cfg: ModelConfig,
                       rng: np.random.Generator | None = None,
                       dropout_active: bool = False) -> Tensor:
    mask = layout.valid[:, None, :]
    for blk in params.recommender:
        h = transformer_block(h, blk, mask, cfg.dropout, rng, dropout_active, layout)
    return h


def recommender_hidden(h: Tensor, valid: np.ndarray, params: ModelParameters, cfg: ModelConfig,
                       rng: np.random.Generator | None = None,
                       dropout_active: bool = False) -> Tensor:
    mask = valid[:, None, :]
    for blk in params.recommender:
        h = transformer_block(h, blk, mask, cfg.dropout, rng, dropout_active)
    return h


def recommend_distributions(h: Tensor, valid: np.ndarray, params: ModelParameters,
                            cfg: ModelConfig) -> np.ndarray:
    """``(B, T, total_rows)`` item distributions at every position (inference)."""
    return row_softmax(_output_logits(recommender_hidden(h, valid, params, cfg), params)).data


def next_item_distributions(seqs: Sequence[Sequence[int]], params: ModelParameters,
                            cfg: ModelConfig, vocab: Vocab) -> np.ndarray:
    """``(B, total_rows)`` next-item distribution read at an appended mask slot."""
    seqs = [list(s) + [vocab.mask_id] for s in seqs]
    ids, valid = pad_batch(seqs, vocab.pad_id)
    h, layout = encode_packed(ids, valid, params, cfg)
    hr = recommender_packed(h, layout, params, cfg)
    last = layout.rows(np.arange(len(seqs)), [len(s) - 1 for s in seqs])
    return row_softmax(Tensor(hr.data[last] @ params.item_emb.data.T)).data


def score_candidates(seqs: Sequence[Sequence[int]], candidates: np.ndarray,
                     params: ModelParameters, cfg: ModelConfig, vocab: Vocab) -> np.ndarray:
    """Probability of each candidate being the next item, for ``(B, C)`` candidate ids."""
    probs = next_item_distributions(seqs, params, cfg, vocab)
    return np.take_along_axis(probs, np.asarray(candidates, dtype=np.int64), axis=1)


def next_item_scores(seq: Sequence[int], candidates: Sequence[int], params: ModelParameters,
                     cfg: ModelConfig, vocab: Vocab) -> np.ndarray:
    return score_candidates([seq], np.asarray([candidates]), params, cfg, vocab)[0]
