"""Joint corrector + recommender objective and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, add, cross_entropy, scale, take_rows
from .data import (
    CorruptionConfig,
    CorruptionSample,
    Dataset,
    MaskedSample,
    Vocab,
    corrupt_sequence,
    derive_rng,
    mask_sequence,
    truncate_sample,
)
from .model import (
    ModelConfig,
    ModelParameters,
    _output_logits,
    correct_batch,
    encode_packed,
    generator_packed,
    operation_logits,
    pad_batch,
    recommender_packed,
)
from .optim import AdamState, adam_step, clip_gradients

log = logging.getLogger(__name__)

VARIANTS = ("full", "dc_only", "ic_only", "recommender_only")

# (variant, op_set) -> model name used in reports
MODEL_NAMES = {
    ("full", "full"): "STEAM",
    ("dc_only", "full"): "STEAM-DC",
    ("ic_only", "full"): "STEAM-IC",
    ("recommender_only", "full"): "Recommender",
    ("full", "delete_keep"): "STEAM-DK",
    ("full", "insert_keep"): "STEAM-IK",
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 0.001
    clip_lo: float = -5.0
    clip_hi: float = 5.0
    seed: int = 0
    variant: str = "full"
    op_set: str = "full"

    def __post_init__(self):
        if (self.variant, self.op_set) not in MODEL_NAMES:
            raise ValueError(f"unsupported variant/op_set combination: {self.variant}/{self.op_set}")

    @property
    def uses_corrector(self) -> bool:
        return self.variant != "recommender_only"

    @property
    def eval_mode(self) -> str:
        return "corrected" if self.uses_corrector else "raw"


@dataclass
class LossReport:
    op_term: float = 0.0
    insert_term: float = 0.0
    raw_mask_term: float = 0.0
    corrected_mask_term: float = 0.0

    @property
    def l1(self) -> float:
        return self.op_term + self.insert_term

    @property
    def l2(self) -> float:
        return self.raw_mask_term + self.corrected_mask_term

    @property
    def l(self) -> float:
        return self.l1 + self.l2


# ------------------------------------------------------------------- losses


def corrector_loss(samples: Sequence[CorruptionSample], params: ModelParameters, cfg: ModelConfig,
                   vocab: Vocab, rng: np.random.Generator | None = None,
                   dropout_active: bool = False) -> tuple[Tensor, Tensor]:
    """Summed NLL of the operation labels and of every teacher-forced insertion step.

    Returns ``(operation_term, insertion_term)``; the insertion term is None when no
    sample has an insert label.
    """
    ids, valid = pad_batch([s.modified for s in samples], vocab.pad_id)
    h, layout = encode_packed(ids, valid, params, cfg, rng, dropout_active)
    labels = np.concatenate([np.asarray(s.ops, dtype=np.int64) for s in samples])
    op_term = cross_entropy(operation_logits(h, params), labels)

    anchors = [(b, pos, tgt) for b, s in enumerate(samples)
               for pos, tgt in sorted(s.inserted_targets.items())]
    if not anchors:
        return op_term, None
    # teacher forcing: inputs are the target minus its final eos
    prefix, prefix_valid = pad_batch([tgt[:-1] for _, _, tgt in anchors], vocab.pad_id)
    anchor_rows = layout.rows([a[0] for a in anchors], [a[1] for a in anchors])
    hc, glayout = generator_packed(take_rows(h, anchor_rows), prefix, prefix_valid,
                                   params, cfg, rng, dropout_active)
    rows_a, rows_n, tgt_ids = [], [], []
    for row, (_, _, tgt) in enumerate(anchors):
        for n, item in enumerate(tgt):
            rows_a.append(row)
            rows_n.append(n)
            tgt_ids.append(item)
    ins_term = cross_entropy(_output_logits(take_rows(hc, glayout.rows(rows_a, rows_n)), params), tgt_ids)
    return op_term, ins_term


def masked_item_loss(masked: Sequence[MaskedSample], params: ModelParameters, cfg: ModelConfig,
                     vocab: Vocab, rng: np.random.Generator | None = None,
                     dropout_active: bool = False) -> Tensor:
    """Summed NLL of every masked target under the recommender."""
    ids, valid = pad_batch([m.masked for m in masked], vocab.pad_id)
    h, layout = encode_packed(ids, valid, params, cfg, rng, dropout_active)
    hr = recommender_packed(h, layout, params, cfg, rng, dropout_active)
    bi, ti, tgt = [], [], []
    for b, m in enumerate(masked):
        for pos, item in sorted(m.targets.items()):
            bi.append(b)
            ti.append(pos)
            tgt.append(item)
    return cross_entropy(_output_logits(take_rows(hr, layout.rows(bi, ti)), params), tgt)


def recommender_loss(raw_masked: Sequence[MaskedSample],
                     corrected_masked: Sequence[MaskedSample] | None,
                     params: ModelParameters, cfg: ModelConfig, vocab: Vocab,
                     rng: np.random.Generator | None = None,
                     dropout_active: bool = False) -> tuple[Tensor, Tensor | None]:
    raw = masked_item_loss(raw_masked, params, cfg, vocab, rng, dropout_active)
    if not corrected_masked:
        return raw, None
    return raw, masked_item_loss(corrected_masked, params, cfg, vocab, rng, dropout_active)


# -------------------------------------------------------------------- steps


@dataclass
class PreparedBatch:
    samples: list[CorruptionSample]
    raw_masked: list[MaskedSample]
    corrected_masked: list[MaskedSample]
    n_sequences: int


def prepare_batch(raw_seqs: Sequence[Sequence[int]], keys: Sequence[int], epoch: int,
                  params: ModelParameters, mcfg: ModelConfig, ccfg: CorruptionConfig,
                  tcfg: TrainConfig, vocab: Vocab) -> PreparedBatch:
    """Corrupt, correct (inference mode, no gradient) and mask one batch of raw sequences."""
    rngs = [derive_rng(tcfg.seed, epoch, k) for k in keys]
    samples = []
    corrected = []
    if tcfg.uses_corrector:
        vcfg = ccfg.for_variant(tcfg.variant)
        for seq, rng in zip(raw_seqs, rngs):
            s = corrupt_sequence(seq, vcfg, vocab, rng)
            if s is not None:
                samples.append(truncate_sample(s, mcfg.max_corrected_len))
        corrected = [c for c, _ in correct_batch(raw_seqs, params, mcfg, vocab)]
    raw_masked = [mask_sequence(s, ccfg.p_mask, vocab, r) for s, r in zip(raw_seqs, rngs)]
    corrected_masked = [mask_sequence(s, ccfg.p_mask, vocab, r) for s, r in zip(corrected, rngs)]
    return PreparedBatch(samples, raw_masked, corrected_masked, len(raw_seqs))


def batch_loss(prep: PreparedBatch, params: ModelParameters, mcfg: ModelConfig, vocab: Vocab,
               rng: np.random.Generator | None = None,
               dropout_active: bool = False) -> tuple[Tensor, LossReport]:
    """``L = L1 + L2`` averaged over the batch's sequences.  Run inside a Tape for gradients."""
    inv = 1.0 / prep.n_sequences
    terms: dict[str, Tensor | None] = {"op": None, "ins": None, "raw": None, "cor": None}
    if prep.samples:
        terms["op"], terms["ins"] = corrector_loss(prep.samples, params, mcfg, vocab, rng, dropout_active)
    terms["raw"], terms["cor"] = recommender_loss(prep.raw_masked, prep.corrected_masked,
                                                  params, mcfg, vocab, rng, dropout_active)
    total = None
    for t in terms.values():
        if t is not None:
            total = t if total is None else add(total, t)
    total = scale(total, inv)

    def val(t):
        return 0.0 if t is None else float(t.data) * inv

    report = LossReport(val(terms["op"]), val(terms["ins"]), val(terms["raw"]), val(terms["cor"]))
    return total, report


def apply_gradients(params: ModelParameters, state: AdamState, tcfg: TrainConfig) -> None:
    tensors = params.tensors()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    adam_step(tensors, clip_gradients(grads, tcfg.clip_lo, tcfg.clip_hi), state)


def train_step(prep: PreparedBatch, params: ModelParameters, state: AdamState, mcfg: ModelConfig,
               tcfg: TrainConfig, vocab: Vocab, rng: np.random.Generator | None,
               dropout_active: bool = True) -> LossReport:
    """Forward both losses, backpropagate, clip and take one Adam step."""
    params.zero_grad()
    with Tape() as tape:
        loss, report = batch_loss(prep, params, mcfg, vocab, rng, dropout_active)
    tape.backward(loss)
    apply_gradients(params, state, tcfg)
    return report


# --------------------------------------------------------------------- loop


@dataclass
class EpochRecord:
    epoch: int
    l1: float
    l2: float
    l: float
    val_hr10: float
    seconds: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.l1:.6f}\t{self.l2:.6f}\t{self.l:.6f}\t"
                f"{self.val_hr10:.2f}\t{self.seconds:.3f}")


@dataclass
class TrainResult:
    params: ModelParameters
    best_params: ModelParameters
    best_epoch: int
    history: list[EpochRecord] = field(default_factory=list)


def train(dataset: Dataset, params: ModelParameters, mcfg: ModelConfig, tcfg: TrainConfig,
          ccfg: CorruptionConfig = CorruptionConfig(),
          on_epoch: Callable[[EpochRecord, ModelParameters, bool], None] | None = None,
          validate: bool = True, validate_every: int = 1) -> TrainResult:
    """Seeded epoch loop; validation HR@10 selects the best parameters.

    Validation runs after the first epoch, every ``validate_every`` epochs and after
    the last one; other epochs record ``val_hr10`` as NaN.  ``on_epoch(record, params, improved)`` runs
    after every epoch (checkpointing, logging).
    """
    from .evaluation import evaluate

    vocab = dataset.vocab
    state = AdamState.for_params(params.tensors(), lr=tcfg.learning_rate)
    train_seqs = [s for s in dataset.train if s]
    best, best_hr, best_epoch = params.copy(), -1.0, 0
    history = []
    start = time.perf_counter()
    for epoch in range(1, tcfg.epochs + 1):
        order = derive_rng(tcfg.seed, 3, epoch).permutation(len(train_seqs))
        sums = np.zeros(3)
        n_batches = 0
        for step, lo in enumerate(range(0, len(order), tcfg.batch_size)):
            idx = order[lo:lo + tcfg.batch_size]
            prep = prepare_batch([train_seqs[i] for i in idx], idx, epoch, params, mcfg, ccfg, tcfg, vocab)
            report = train_step(prep, params, state, mcfg, tcfg, vocab,
                                derive_rng(tcfg.seed, 7, epoch, step))
            sums += (report.l1, report.l2, report.l)
            n_batches += 1
        hr10 = float("nan")
        due = epoch == 1 or epoch % validate_every == 0 or epoch == tcfg.epochs
        if validate and due and dataset.valid:
            hr10 = evaluate(params, dataset.valid, mcfg, vocab, mode=tcfg.eval_mode,
                            op_set=tcfg.op_set).overall["hr10"]
        l1, l2, l = sums / max(n_batches, 1)
        rec = EpochRecord(epoch, l1, l2, l, hr10, time.perf_counter() - start)
        history.append(rec)
        improved = hr10 > best_hr
        if improved:
            best, best_hr, best_epoch = params.copy(), hr10, epoch
        log.info("epoch %d  L1 %.4f  L2 %.4f  val HR@10 %.2f", epoch, l1, l2, hr10)
        if on_epoch is not None:
            on_epoch(rec, params, improved)
    return TrainResult(params, best, best_epoch, history)


def write_train_log(history: Sequence[EpochRecord], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("epoch\tl1\tl2\tl\tval_hr10\twallclock_seconds\n")
        for rec in history:
            fh.write(rec.line() + "\n")
    tmp.replace(path)
