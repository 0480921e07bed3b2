"""Synthetic first-order Markov interaction data with known injected noise.

Items are grouped into clusters; a user mostly walks within one cluster along a
sparse, skewed successor table and occasionally jumps to another cluster.  Noise
items are drawn uniformly and inserted *before* chain items, never after the last
input item, so the positions a corrector should delete are known exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, EvalInstance, Op, Vocab, derive_rng, leave_one_out_split, sample_negatives
from .evaluation import EvalReport, evaluate
from .model import ModelConfig, ModelParameters, correct_batch
from .training import TrainConfig, train


@dataclass
class MarkovChain:
    transitions: np.ndarray  # (n_items + 1, n_items + 1); row/col 0 unused
    start: np.ndarray

    @property
    def n_items(self) -> int:
        return len(self.start) - 1

    def walk(self, length: int, rng: np.random.Generator) -> list[int]:
        n = self.n_items + 1
        seq = [int(rng.choice(n, p=self.start))]
        while len(seq) < length:
            seq.append(int(rng.choice(n, p=self.transitions[seq[-1]])))
        return seq


def make_chain(n_items: int = 200, n_clusters: int = 10, successors: int = 8,
               stay: float = 0.85, seed: int = 0) -> MarkovChain:
    rng = derive_rng(seed, 101)
    cluster = np.arange(n_items) % n_clusters
    t = np.zeros((n_items + 1, n_items + 1))
    for i in range(n_items):
        mates = np.flatnonzero((cluster == cluster[i]) & (np.arange(n_items) != i))
        succ = rng.choice(mates, size=min(successors, len(mates)), replace=False)
        w = 1.0 / np.arange(1, len(succ) + 1)
        t[i + 1, succ + 1] = stay * w / w.sum()
        t[i + 1, 1:] += (1.0 - stay) / n_items
    start = np.r_[0.0, np.full(n_items, 1.0 / n_items)]
    return MarkovChain(t, start)


def inject_noise(seq: list[int], rate: float, n_items: int,
                 rng: np.random.Generator) -> tuple[list[int], list[bool]]:
    """Insert uniform noise before items so that about ``rate`` of the output is noise."""
    q = rate / (1.0 - rate)
    out, flags = [], []
    for item in seq:
        if rng.random() < q:
            out.append(int(rng.integers(1, n_items + 1)))
            flags.append(True)
        out.append(item)
        flags.append(False)
    return out, flags


@dataclass
class NoisyInstance:
    instance: EvalInstance
    noise: list[bool]


def _user(chain, mean_len, noise, rng):
    length = int(rng.integers(mean_len // 2, 3 * mean_len // 2 + 1))
    clean = chain.walk(length + 1, rng)
    noisy, flags = inject_noise(clean[:-1], noise, chain.n_items, rng)
    return noisy, flags, clean[-1]


def markov_dataset(n_items: int = 200, n_users: int = 2000, mean_len: int = 20,
                   noise: float = 0.15, seed: int = 0,
                   chain: MarkovChain | None = None) -> tuple[Dataset, MarkovChain]:
    """Users' noisy sequences split leave-one-out; targets are always clean chain items."""
    chain = chain or make_chain(n_items, seed=seed)
    vocab = Vocab(n_items)
    seqs = {}
    for u in range(n_users):
        noisy, _, target = _user(chain, mean_len, noise, derive_rng(seed, 102, u))
        seqs[str(u)] = (noisy + [target])[-50:]
    split = leave_one_out_split(seqs)
    valid, test = [], []
    for idx, user in enumerate(split.users):
        hist = seqs[user]
        (v_in, v_gt), (t_in, t_gt) = split.valid[idx], split.test[idx]
        valid.append(EvalInstance(v_in, v_gt, sample_negatives(hist, vocab, derive_rng(seed, 103, idx))))
        test.append(EvalInstance(t_in, t_gt, sample_negatives(hist, vocab, derive_rng(seed, 104, idx))))
    return Dataset(vocab, split.users, [str(i) for i in range(1, n_items + 1)],
                   split.train, valid, test), chain


def noisy_heldout(chain: MarkovChain, n_users: int = 2000, mean_len: int = 20,
                  noise: float = 0.15, seed: int = 1) -> list[NoisyInstance]:
    """Fresh users with noise flags on every input position."""
    vocab = Vocab(chain.n_items)
    out = []
    for u in range(n_users):
        rng = derive_rng(seed, 105, u)
        noisy, flags, target = _user(chain, mean_len, noise, rng)
        noisy, flags = noisy[-49:], flags[-49:]
        negs = sample_negatives(set(noisy) | {target}, vocab, rng)
        out.append(NoisyInstance(EvalInstance(noisy, target, negs), flags))
    return out


def delete_scores(held: Sequence[NoisyInstance], logs) -> tuple[float, float]:
    """Precision and recall of delete labels against the injected-noise flags."""
    tp = fp = fn = 0
    for inst, lg in zip(held, logs):
        for label, noisy in zip(lg.labels, inst.noise):
            deleted = label == Op.DELETE
            tp += deleted and noisy
            fp += deleted and not noisy
            fn += noisy and not deleted
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


@dataclass
class SyntheticRun:
    variant: str
    seed: int
    hr10: float
    hr10_raw: float
    delete_precision: float | None
    delete_recall: float | None
    seconds: float
    report: EvalReport
    history: list


def run_synthetic(variant: str = "full", seed: int = 0, epochs: int = 50, batch_size: int = 16,
                  embed_dim: int = 32, dropout: float = 0.5, data_seed: int = 0, n_users: int = 2000,
                  log_epoch=None) -> SyntheticRun:
    """Train one variant on the Markov dataset and score it on fresh noisy users.

    ``hr10`` is corrected-mode HR@10 for corrector variants and raw-mode otherwise.
    """
    ds, chain = markov_dataset(n_users=n_users, seed=data_seed)
    held = noisy_heldout(chain, n_users=n_users, seed=data_seed + 1)
    mcfg = ModelConfig(embed_dim=embed_dim, dropout=dropout)
    tcfg = TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed, variant=variant)
    params = ModelParameters.init(mcfg, ds.vocab, derive_rng(seed, 0))
    start = time.perf_counter()
    result = train(ds, params, mcfg, tcfg, validate_every=10,
                   on_epoch=(lambda rec, *_: log_epoch(rec)) if log_epoch else None)
    seconds = time.perf_counter() - start
    insts = [h.instance for h in held]
    report = evaluate(result.params, insts, mcfg, ds.vocab, mode=tcfg.eval_mode)
    precision = recall = None
    if tcfg.uses_corrector:
        logs = [lg for _, lg in correct_batch([i.input for i in insts], result.params, mcfg, ds.vocab)]
        precision, recall = delete_scores(held, logs)
    return SyntheticRun(variant, seed, report.overall["hr10"], report.groups["overall-R"]["hr10"],
                        precision, recall, seconds, report, result.history)
