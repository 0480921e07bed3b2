"""Ranking metrics over ground truth + 99 negatives, grouping and robustness."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import EvalInstance, Op, Vocab
from .model import ModelConfig, ModelParameters, correct_batch, next_item_distributions

KS = (5, 10)
GROUPS = ("overall-R", "overall-C", "changed-R", "changed-C", "unchanged")
METRICS = ("hr5", "hr10", "mrr5", "mrr10")


class EvalError(ValueError):
    pass


def worker_threads() -> int:
    try:
        return max(1, int(os.environ["STEAMREC_THREADS"]))
    except (KeyError, ValueError):
        return os.cpu_count() or 1


@dataclass
class RankResult:
    instance: int
    rank: int
    scores: np.ndarray


def rank_of_first(scores) -> int:
    """1-based rank of ``scores[0]``; ties count against it."""
    scores = np.asarray(scores, dtype=np.float64)
    return 1 + int(np.count_nonzero(scores[1:] >= scores[0]))


def rank_instance(inst: EvalInstance, scores: dict[int, float], instance: int = 0) -> RankResult:
    try:
        ordered = np.array([scores[c] for c in inst.candidates], dtype=np.float64)
    except KeyError as exc:
        raise EvalError(f"no score for candidate {exc.args[0]}") from None
    return RankResult(instance, rank_of_first(ordered), ordered)


def hr_mrr(ranks, k: int) -> tuple[float, float]:
    """HR@k and MRR@k as percentages."""
    ranks = np.asarray([r.rank if isinstance(r, RankResult) else r for r in ranks], dtype=np.float64)
    if ranks.size == 0:
        raise EvalError("cannot compute metrics over zero results")
    hit = ranks <= k
    return 100.0 * hit.mean(), 100.0 * np.where(hit, 1.0 / ranks, 0.0).mean()


def group_metrics(ranks) -> dict[str, float] | None:
    ranks = list(ranks)
    if not ranks:
        return None
    out: dict[str, float] = {"count": len(ranks)}
    for k in KS:
        out[f"hr{k}"], out[f"mrr{k}"] = hr_mrr(ranks, k)
    return out


def disturbance(v_real: float, v_sim: float) -> float | None:
    """Relative change in percent from real to simulated; None when ``v_real == 0``."""
    if v_real == 0:
        return None
    return 100.0 * (v_sim - v_real) / v_real


def format_disturbance(value: float | None) -> str:
    return "-" if value is None else f"{value:+.2f}%"


@dataclass
class EvalReport:
    mode: str
    count: int
    groups: dict[str, dict | None]
    op_stats: dict[str, float] | None = None
    ranks_raw: np.ndarray | None = field(default=None, repr=False)
    ranks_corrected: np.ndarray | None = field(default=None, repr=False)

    @property
    def overall(self) -> dict:
        return self.groups["overall-C" if self.mode == "corrected" else "overall-R"]

    def __getattr__(self, name):
        if name in METRICS:
            return self.overall[name]
        raise AttributeError(name)

    def table(self, title: str = "") -> str:
        lines = [title] if title else []
        lines.append(f"{'Group':<12}" + "".join(f"{m.upper().replace('HR', 'HR@').replace('MRR', 'MRR@'):>9}"
                                              for m in METRICS) + f"{'N':>8}")
        for g in GROUPS:
            vals = self.groups.get(g)
            if vals is None:
                if g in self.groups:
                    lines.append(f"{g:<12}" + f"{'-':>9}" * len(METRICS) + f"{0:>8}")
                continue
            lines.append(f"{g:<12}" + "".join(f"{vals[m]:>9.2f}" for m in METRICS)
                         + f"{int(vals['count']):>8}")
        if self.op_stats is not None:
            s = self.op_stats
            lines.append("")
            lines.append(f"{'#Changed':>9}{'#Keep':>9}{'#Delete':>9}{'#Insert':>9}")
            lines.append(f"{s['pct_changed']:>9.2f}{s['pct_keep']:>9.2f}"
                         f"{s['pct_delete']:>9.2f}{s['pct_insert']:>9.2f}")
        return "\n".join(lines)

    def key_values(self) -> list[str]:
        out = []
        for g in GROUPS:
            vals = self.groups.get(g)
            if vals is None:
                continue
            for k in KS:
                out.append(f"hr.{g}.{k} = {vals[f'hr{k}']:.2f}")
                out.append(f"mrr.{g}.{k} = {vals[f'mrr{k}']:.2f}")
            out.append(f"count.{g}.all = {int(vals['count'])}")
        if self.op_stats is not None:
            for key, v in self.op_stats.items():
                out.append(f"ops.{key.removeprefix('pct_')}.pct = {v:.2f}")
        return out


def operation_stats(logs) -> dict[str, float]:
    """Percent of changed sequences and of each applied label over all positions."""
    logs = list(logs)
    counts = np.zeros(3)
    for lg in logs:
        counts += np.bincount(lg.labels, minlength=3)
    total = counts.sum() or 1.0
    return {
        "pct_changed": 100.0 * sum(lg.changed for lg in logs) / max(len(logs), 1),
        "pct_keep": 100.0 * counts[Op.KEEP] / total,
        "pct_delete": 100.0 * counts[Op.DELETE] / total,
        "pct_insert": 100.0 * counts[Op.INSERT] / total,
    }


def _ranks(seqs, instances, params, cfg, vocab, batch_size) -> np.ndarray:
    chunks = [range(lo, min(lo + batch_size, len(seqs))) for lo in range(0, len(seqs), batch_size)]

    def run(chunk):
        probs = next_item_distributions([seqs[i] for i in chunk], params, cfg, vocab)
        return [rank_of_first(p[instances[i].candidates]) for p, i in zip(probs, chunk)]

    workers = min(worker_threads(), len(chunks))
    if workers <= 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    return np.array([r for part in parts for r in part], dtype=np.int64)


def evaluate(params: ModelParameters, instances: Sequence[EvalInstance], cfg: ModelConfig,
             vocab: Vocab, mode: str = "corrected", op_set: str = "full",
             force_label: int | None = None, batch_size: int = 256) -> EvalReport:
    """Rank every instance's ground truth; in corrected mode also group by changed/unchanged."""
    if mode not in ("raw", "corrected"):
        raise EvalError(f"unknown mode {mode!r}")
    if not instances:
        raise EvalError("no evaluation instances")
    raw_inputs = [inst.input for inst in instances]
    raw_ranks = _ranks(raw_inputs, instances, params, cfg, vocab, batch_size)
    groups: dict[str, dict | None] = {"overall-R": group_metrics(raw_ranks)}
    if mode == "raw":
        return EvalReport(mode, len(instances), groups, ranks_raw=raw_ranks)

    corrected, logs = [], []
    for lo in range(0, len(raw_inputs), batch_size):
        for fixed, lg in correct_batch(raw_inputs[lo:lo + batch_size], params, cfg, vocab,
                                       op_set, force_label):
            corrected.append(fixed)
            logs.append(lg)
    cor_ranks = _ranks(corrected, instances, params, cfg, vocab, batch_size)
    changed = np.array([list(c) != list(r) for c, r in zip(corrected, raw_inputs)])
    groups["overall-C"] = group_metrics(cor_ranks)
    groups["changed-R"] = group_metrics(raw_ranks[changed])
    groups["changed-C"] = group_metrics(cor_ranks[changed])
    groups["unchanged"] = group_metrics(raw_ranks[~changed])
    stats = operation_stats(logs)
    # changed means literally different output, not merely a non-keep label
    stats["pct_changed"] = 100.0 * changed.mean()
    return EvalReport(mode, len(instances), groups, stats, raw_ranks, cor_ranks)


def disturbance_rows(real: EvalReport, sim: EvalReport) -> list[str]:
    """``metric  real  sim  dist%``; real uses raw sequences, simulated uses the report's mode."""
    rows = ["metric\treal\tsim\tdist%"]
    for m in METRICS:
        v_real = real.groups["overall-R"][m]
        v_sim = sim.overall[m]
        rows.append(f"{m}\t{v_real:.2f}\t{v_sim:.2f}\t{format_disturbance(disturbance(v_real, v_sim))}")
    return rows


def write_report(report: EvalReport, out_dir, name: str, title: str = "") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt, kv = out_dir / f"{name}.txt", out_dir / f"{name}.kv"
    txt.write_text(report.table(title) + "\n", encoding="utf-8")
    kv.write_text("\n".join(report.key_values()) + "\n", encoding="utf-8")
    return txt, kv
