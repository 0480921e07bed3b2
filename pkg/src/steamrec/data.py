"""Interaction logs to training sequences, eval instances and random corruptions."""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAX_RAW_LEN = 50
N_NEGATIVES = 99


class Op(IntEnum):
    """Correction labels; the integer codes index rows of the operation projection."""

    KEEP = 0
    DELETE = 1
    INSERT = 2


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Item ids: 0 is padding, 1..item_count are real items, then mask and eos."""

    item_count: int
    pad_id: int = field(default=0, init=False)

    @property
    def mask_id(self) -> int:
        return self.item_count + 1

    @property
    def eos_id(self) -> int:
        return self.item_count + 2

    @property
    def total_rows(self) -> int:
        return self.item_count + 3

    def is_real(self, item: int) -> bool:
        return 1 <= item <= self.item_count


@dataclass(frozen=True)
class CorruptionConfig:
    p_keep: float = 0.4
    p_insert: float = 0.1
    p_delete: float = 0.5
    p_mask: float = 0.5
    max_continuous_insert: int = 5

    def __post_init__(self):
        for name in ("p_keep", "p_insert", "p_delete", "p_mask"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if abs(self.p_keep + self.p_insert + self.p_delete - 1.0) > 1e-9:
            raise ValueError("p_keep + p_insert + p_delete must equal 1")
        if self.max_continuous_insert < 1:
            raise ValueError("max_continuous_insert must be positive")

    def for_variant(self, variant: str) -> "CorruptionConfig":
        """Restrict the corruption generator for the single-task ablations."""
        if variant == "dc_only":
            return CorruptionConfig(1.0 - self.p_insert, self.p_insert, 0.0,
                                    self.p_mask, self.max_continuous_insert)
        if variant == "ic_only":
            return CorruptionConfig(1.0 - self.p_delete, 0.0, self.p_delete,
                                    self.p_mask, self.max_continuous_insert)
        return self


@dataclass
class CorruptionSample:
    modified: list[int]
    ops: list[int]
    inserted_targets: dict[int, list[int]]


@dataclass
class MaskedSample:
    masked: list[int]
    targets: dict[int, int]


@dataclass
class EvalInstance:
    input: list[int]
    ground_truth: int
    negatives: list[int]

    @property
    def candidates(self) -> list[int]:
        return [self.ground_truth, *self.negatives]


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, key...) so per-sample draws are order-free."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


# ---------------------------------------------------------------- ingestion


def load_interactions(path) -> list[tuple[str, str, int]]:
    """Read ``user<TAB>item<TAB>timestamp`` lines; ``#`` lines and blank lines are skipped."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise DataError(f"line {lineno}: expected user<TAB>item<TAB>timestamp")
            try:
                ts = int(parts[2])
            except ValueError:
                raise DataError(f"line {lineno}: timestamp {parts[2]!r} is not an integer") from None
            records.append((parts[0], parts[1], ts))
    return records


def five_core_filter(records: Sequence[tuple], k: int = 5) -> list[tuple]:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    records = list(records)
    while True:
        users = Counter(r[0] for r in records)
        items = Counter(r[1] for r in records)
        kept = [r for r in records if users[r[0]] >= k and items[r[1]] >= k]
        if len(kept) == len(records):
            return kept
        records = kept


def build_sequences(records: Sequence[tuple], max_len: int | None = MAX_RAW_LEN):
    """Per-user chronological sequences of dense item ids.

    Returns ``(sequences, item_ids)`` where ``sequences`` maps user -> ids (users in
    first-appearance order) and ``item_ids[d - 1]`` is the original id of dense id ``d``.
    Ties in timestamp keep file order.  Only the most recent ``max_len`` items are kept.
    """
    dense: dict[str, int] = {}
    per_user: dict[str, list[tuple[int, int, int]]] = defaultdict(list)
    for order, (user, item, ts) in enumerate(records):
        if item not in dense:
            dense[item] = len(dense) + 1
        per_user[user].append((ts, order, dense[item]))
    sequences = {}
    for user, rows in per_user.items():
        seq = [d for _, _, d in sorted(rows)]
        sequences[user] = seq if max_len is None else seq[-max_len:]
    return sequences, list(dense)


@dataclass
class Split:
    users: list[str]
    train: list[list[int]]
    valid: list[tuple[list[int], int]]
    test: list[tuple[list[int], int]]
    skipped: int = 0


def leave_one_out_split(sequences: dict[str, list[int]]) -> Split:
    split = Split([], [], [], [])
    for user, seq in sequences.items():
        if len(seq) < 3:
            split.skipped += 1
            continue
        split.users.append(user)
        split.train.append(seq[:-2])
        split.valid.append((seq[:-2], seq[-2]))
        split.test.append((seq[:-1], seq[-1]))
    if split.skipped:
        log.warning("skipped %d sequences shorter than 3", split.skipped)
    return split


def sample_negatives(history: Iterable[int], vocab: Vocab, rng: np.random.Generator,
                     n: int = N_NEGATIVES, short_ok: bool = False) -> list[int]:
    """``n`` distinct real items the user never interacted with, uniform without replacement.

    With ``short_ok`` a catalogue too small for ``n`` yields every unseen item instead
    of raising (tiny fixtures).
    """
    seen = np.fromiter(set(history), dtype=np.int64)
    pool = np.setdiff1d(np.arange(1, vocab.item_count + 1), seen, assume_unique=True)
    if len(pool) < n:
        if not short_ok:
            raise DataError(f"only {len(pool)} unseen items available, need {n} negatives")
        n = len(pool)
    return [int(x) for x in rng.choice(pool, size=n, replace=False)]


# ------------------------------------------------------------ corruption


def _noise_item(exclude: set[int], vocab: Vocab, rng: np.random.Generator) -> int:
    while True:
        item = int(rng.integers(1, vocab.item_count + 1))
        if item not in exclude:
            return item


def corrupt_sequence(raw: Sequence[int], cfg: CorruptionConfig, vocab: Vocab,
                     rng: np.random.Generator) -> CorruptionSample | None:
    """Randomly insert noise and delete items; label what would undo it.

    Noise items are labelled delete.  A run of deleted raw items is attached to the
    next surviving raw item, which is labelled insert and carries the run nearest
    item first, terminated by eos.  Returns None for sequences shorter than 2.
    """
    if len(raw) < 2:
        return None
    cap = cfg.max_continuous_insert
    raw_set = set(raw)
    can_insert = len(raw_set) < vocab.item_count
    modified: list[int] = []
    ops: list[int] = []
    targets: dict[int, list[int]] = {}
    run: list[int] = []
    last = len(raw) - 1
    for j, item in enumerate(raw):
        pk, pi, pd = cfg.p_keep, cfg.p_insert, cfg.p_delete
        if j == last:
            pd = 0.0
            total = pk + pi
            pk, pi = (pk / total, pi / total) if total > 0 else (1.0, 0.0)
        u = rng.random()
        if u >= pk + pi and pd > 0 and len(run) < cap:
            run.append(item)
            continue
        if pk <= u < pk + pi and can_insert:
            k = 1
            while k < cap and rng.random() < cfg.p_insert:
                k += 1
            for _ in range(k):
                modified.append(_noise_item(raw_set, vocab, rng))
                ops.append(Op.DELETE)
        if run:
            targets[len(modified)] = run[::-1] + [vocab.eos_id]
            ops.append(Op.INSERT)
            run = []
        else:
            ops.append(Op.KEEP)
        modified.append(item)
    return CorruptionSample(modified, [int(o) for o in ops], targets)


def truncate_sample(sample: CorruptionSample, max_len: int) -> CorruptionSample:
    """Keep the most recent ``max_len`` positions of an over-long modified sequence."""
    drop = len(sample.modified) - max_len
    if drop <= 0:
        return sample
    return CorruptionSample(
        sample.modified[drop:], sample.ops[drop:],
        {pos - drop: t for pos, t in sample.inserted_targets.items() if pos >= drop})


def apply_operations(seq: Sequence[int], ops: Sequence[int],
                     insertions: dict[int, Sequence[int]]) -> list[int]:
    """Drop delete-labelled items; put each insertion (generation order) reversed before its anchor."""
    out: list[int] = []
    for pos, (item, op) in enumerate(zip(seq, ops)):
        if op == Op.DELETE:
            continue
        if op == Op.INSERT:
            out.extend(reversed(list(insertions.get(pos, ()))))
        out.append(item)
    return out


def mask_sequence(seq: Sequence[int], p_mask: float, vocab: Vocab,
                  rng: np.random.Generator) -> MaskedSample:
    """Mask each position with probability ``p_mask``; force one mask if none was drawn."""
    if not seq:
        raise DataError("cannot mask an empty sequence")
    chosen = rng.random(len(seq)) < p_mask
    if not chosen.any():
        chosen[rng.integers(len(seq))] = True
    masked = list(seq)
    targets = {}
    for pos in np.flatnonzero(chosen):
        targets[int(pos)] = masked[pos]
        masked[pos] = vocab.mask_id
    return MaskedSample(masked, targets)


# ------------------------------------------------------ simulated test set

SIM_KEEP, SIM_INSERT, SIM_DELETE = 0.8, 0.1, 0.1
SIM_MAX_INSERT = 4


def simulate_input(seq: Sequence[int], vocab: Vocab, rng: np.random.Generator):
    """Perturb one test input.  Returns the new input and the drawn decision per item."""
    out: list[int] = []
    decisions: list[str] = []
    last = len(seq) - 1
    for j, item in enumerate(seq):
        u = rng.random()
        if u < SIM_KEEP:
            decisions.append("keep")
        elif u < SIM_KEEP + SIM_INSERT:
            decisions.append("insert")
            k = 1
            while k < SIM_MAX_INSERT and rng.random() < SIM_INSERT:
                k += 1
            out.extend(int(x) for x in rng.integers(1, vocab.item_count + 1, size=k))
        else:
            decisions.append("delete")
            if j != last:
                continue
        out.append(item)
    return out, decisions


def simulate_test_set(instances: Sequence[EvalInstance], vocab: Vocab,
                      rng: np.random.Generator) -> list[EvalInstance]:
    return [EvalInstance(simulate_input(inst.input, vocab, rng)[0], inst.ground_truth,
                         list(inst.negatives))
            for inst in instances]


# ---------------------------------------------------------------- dataset


@dataclass
class Dataset:
    vocab: Vocab
    users: list[str]
    item_ids: list[str]
    train: list[list[int]]
    valid: list[EvalInstance]
    test: list[EvalInstance]
    test_sim: list[EvalInstance] | None = None


@dataclass
class DatasetStats:
    users: int
    items: int
    actions: int

    @property
    def avg_length(self) -> float:
        return self.actions / self.users if self.users else 0.0

    @property
    def sparsity(self) -> float:
        cells = self.users * self.items
        return 100.0 * (1.0 - self.actions / cells) if cells else 0.0

    def header(self) -> str:
        return "Dataset\t#Users\t#Items\t#Actions\tAvg. length\tSparsity"

    def row(self, name: str) -> str:
        return (f"{name}\t{self.users:,}\t{self.items:,}\t{self.actions:,}\t"
                f"{self.avg_length:.1f}\t{self.sparsity:.2f}%")


def records_stats(records: Sequence[tuple]) -> DatasetStats:
    return DatasetStats(len({r[0] for r in records}), len({r[1] for r in records}), len(records))


def build_dataset(records: Sequence[tuple], seed: int) -> tuple[Dataset, DatasetStats]:
    """Five-core, sequences, leave-one-out split and negatives for already-loaded records."""
    records = five_core_filter(records)
    stats = records_stats(records)
    full, item_ids = build_sequences(records, max_len=None)
    vocab = Vocab(len(item_ids))
    split = leave_one_out_split({u: s[-MAX_RAW_LEN:] for u, s in full.items()})
    if vocab.item_count <= N_NEGATIVES:
        log.warning("only %d items: candidate sets will have fewer than %d negatives",
                    vocab.item_count, N_NEGATIVES)
    valid, test = [], []
    for idx, user in enumerate(split.users):
        history = full[user]
        (v_in, v_gt), (t_in, t_gt) = split.valid[idx], split.test[idx]
        valid.append(EvalInstance(v_in, v_gt, sample_negatives(
            history, vocab, derive_rng(seed, 1, idx), short_ok=True)))
        test.append(EvalInstance(t_in, t_gt, sample_negatives(
            history, vocab, derive_rng(seed, 2, idx), short_ok=True)))
    return Dataset(vocab, split.users, item_ids, split.train, valid, test), stats


def _write_lines(path: Path, lines: Iterable[str]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")
    tmp.replace(path)


def _seq_line(seq: Sequence[int]) -> str:
    return " ".join(map(str, seq))


def write_instances(out: Path, name: str, instances: Sequence[EvalInstance]) -> None:
    _write_lines(out / f"{name}.txt", (_seq_line(i.input) for i in instances))
    _write_lines(out / f"{name}_neg.txt", (_seq_line(i.candidates) for i in instances))


def save_dataset(ds: Dataset, out) -> None:
    """Layout: items.tsv, users.tsv, train.txt, {valid,test[,test_sim]}.txt and *_neg.txt."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_lines(out / "items.tsv", (f"{d}\t{orig}" for d, orig in enumerate(ds.item_ids, start=1)))
    _write_lines(out / "users.tsv", (f"{i}\t{u}" for i, u in enumerate(ds.users)))
    _write_lines(out / "train.txt", map(_seq_line, ds.train))
    write_instances(out, "valid", ds.valid)
    write_instances(out, "test", ds.test)
    if ds.test_sim is not None:
        write_instances(out, "test_sim", ds.test_sim)


def _read_ints(path: Path) -> list[list[int]]:
    with open(path, encoding="utf-8") as fh:
        return [[int(x) for x in line.split()] for line in fh]


def read_instances(out: Path, name: str) -> list[EvalInstance]:
    inputs = _read_ints(out / f"{name}.txt")
    cands = _read_ints(out / f"{name}_neg.txt")
    if len(inputs) != len(cands):
        raise DataError(f"{name}: {len(inputs)} inputs but {len(cands)} candidate lines")
    return [EvalInstance(i, c[0], c[1:]) for i, c in zip(inputs, cands)]


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not (path / "items.tsv").exists():
        raise DataError(f"{path} is not a prepared dataset directory (items.tsv missing)")
    with open(path / "items.tsv", encoding="utf-8") as fh:
        item_ids = [line.rstrip("\n").split("\t", 1)[1] for line in fh]
    with open(path / "users.tsv", encoding="utf-8") as fh:
        users = [line.rstrip("\n").split("\t", 1)[1] for line in fh]
    sim = read_instances(path, "test_sim") if (path / "test_sim.txt").exists() else None
    return Dataset(Vocab(len(item_ids)), users, item_ids, _read_ints(path / "train.txt"),
                   read_instances(path, "valid"), read_instances(path, "test"), sim)
