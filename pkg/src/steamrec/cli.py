"""``steamrec`` command line: prepare, simulate, train, correct, evaluate.

Exit codes: 0 success, 1 internal failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (
    DataError,
    Op,
    Vocab,
    build_dataset,
    derive_rng,
    load_dataset,
    load_interactions,
    save_dataset,
    simulate_test_set,
    write_instances,
)
from .evaluation import disturbance_rows, evaluate, operation_stats, write_report
from .model import ModelParameters, correct_batch
from .persistence import (
    CheckpointError,
    ConfigError,
    RunConfig,
    load_checkpoint,
    load_config_file,
    merge_config,
    params_from_checkpoint,
    save_checkpoint,
)
from .training import MODEL_NAMES, train, write_train_log

log = logging.getLogger("steamrec")

FORCE_OPS = {"keep": Op.KEEP, "delete": Op.DELETE, "insert": Op.INSERT}


class UsageError(Exception):
    pass


def _run_config(args, **extra) -> RunConfig:
    layers = [load_config_file(args.config)] if args.config else []
    cli = {"seed": args.seed, "out": args.out}
    cli.update(extra)
    return merge_config(*layers, cli)


def cmd_prepare(args) -> int:
    try:
        records = load_interactions(args.log)
    except OSError as exc:
        raise UsageError(f"cannot read interaction log: {exc}") from None
    cfg = _run_config(args)
    ds, stats = build_dataset(records, cfg.seed)
    save_dataset(ds, cfg.out)
    print(stats.header())
    print(stats.row(Path(args.log).stem))
    return 0


def _load_dataset(path):
    try:
        return load_dataset(path)
    except (OSError, DataError) as exc:
        raise UsageError(f"cannot load dataset: {exc}") from None


def cmd_simulate(args) -> int:
    ds = _load_dataset(args.dataset)
    cfg = _run_config(args)
    out = Path(args.out) if args.out else Path(args.dataset)
    out.mkdir(parents=True, exist_ok=True)
    sim = simulate_test_set(ds.test, ds.vocab, derive_rng(cfg.seed, 11))
    write_instances(out, "test_sim", sim)
    print(f"wrote {len(sim)} simulated test instances to {out}")
    return 0


def cmd_train(args) -> int:
    try:
        cfg = _run_config(args, dataset=args.dataset, variant=args.variant,
                          op_set=args.op_set, epochs=args.epochs)
        tcfg = cfg.train_config()
        mcfg = cfg.model_config()
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if not cfg.dataset:
        raise UsageError("train needs --dataset")
    ds = _load_dataset(cfg.dataset)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    params = ModelParameters.init(mcfg, ds.vocab, derive_rng(cfg.seed, 0))
    echo = cfg.echo()

    history = []

    def on_epoch(rec, current, improved):
        history.append(rec)
        if improved:
            save_checkpoint(current, echo, ds.vocab, out / "best.ckpt")
        write_train_log(history, out / "train.log")

    result = train(ds, params, mcfg, tcfg, cfg.corruption_config(), on_epoch=on_epoch)
    save_checkpoint(result.params, echo, ds.vocab, out / "final.ckpt")
    if not (out / "best.ckpt").exists():
        save_checkpoint(result.best_params, echo, ds.vocab, out / "best.ckpt")
    write_train_log(result.history, out / "train.log")
    print(f"{MODEL_NAMES[(tcfg.variant, tcfg.op_set)]}: best epoch {result.best_epoch}, "
          f"val HR@10 {result.history[result.best_epoch - 1].val_hr10:.2f}")
    return 0


def _load_model(path):
    try:
        ckpt = load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from None
    cfg = merge_config(ckpt.config)
    return cfg, params_from_checkpoint(ckpt, cfg.model_config()), Vocab(ckpt.item_count)


def cmd_correct(args) -> int:
    cfg, params, vocab = _load_model(args.checkpoint)
    seqs = []
    with open(args.sequences, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                seq = [int(x) for x in line.split()]
            except ValueError:
                raise UsageError(f"line {lineno}: non-integer item id") from None
            if not seq:
                raise UsageError(f"line {lineno}: empty sequence")
            bad = [x for x in seq if not vocab.is_real(x)]
            if bad:
                raise UsageError(f"line {lineno}: item id {bad[0]} outside vocabulary 1..{vocab.item_count}")
            seqs.append(seq)
    force = FORCE_OPS[args.force_op] if args.force_op else None
    results = correct_batch(seqs, params, cfg.model_config(), vocab, args.op_set, force) if seqs else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = {Op.KEEP: "keep", Op.DELETE: "delete", Op.INSERT: "insert"}
    with open(out / "corrected.txt", "w", encoding="utf-8") as fh:
        fh.writelines(" ".join(map(str, c)) + "\n" for c, _ in results)
    with open(out / "operations.log", "w", encoding="utf-8") as fh:
        for c, lg in results:
            ins = ";".join(f"{p}:{','.join(map(str, g))}" for p, g in sorted(lg.insertions.items()))
            fh.write(" ".join(names[Op(x)] for x in lg.labels) + ("\t" + ins if ins else "") + "\n")
    stats = operation_stats([lg for _, lg in results])
    stats["pct_changed"] = 100.0 * np.mean([c != s for (c, _), s in zip(results, seqs)]) if seqs else 0.0
    summary = (f"{'#Changed':>8}  {'#Keep':>6}  {'#Delete':>7}  {'#Insert':>7}\n"
               f"{stats['pct_changed']:8.2f}  {stats['pct_keep']:6.2f}  "
               f"{stats['pct_delete']:7.2f}  {stats['pct_insert']:7.2f}\n")
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return 0


def cmd_evaluate(args) -> int:
    cfg, params, vocab = _load_model(args.checkpoint)
    ds = _load_dataset(args.dataset)
    if ds.vocab != vocab:
        raise UsageError("checkpoint vocabulary does not match the dataset")
    sets = args.test_set or ["real"]
    if "simulated" in sets and ds.test_sim is None:
        raise UsageError("no simulated test set in the dataset; run `steamrec simulate` first")
    modes = args.mode or ["corrected" if cfg.variant != "recommender_only" else "raw"]
    op_set = args.op_set or cfg.op_set
    mcfg = cfg.model_config()
    out = Path(args.out)
    name = MODEL_NAMES.get((cfg.variant, op_set), cfg.variant)
    reports = {}
    for test_set in sets:
        instances = ds.test if test_set == "real" else ds.test_sim
        for mode in modes:
            rep = evaluate(params, instances, mcfg, vocab, mode=mode, op_set=op_set)
            reports[(test_set, mode)] = rep
            write_report(rep, out, f"report_{test_set}_{mode}", f"{name} {test_set} test set, {mode} sequences")
            print(rep.table(f"{name} [{test_set}/{mode}]"))
            if mode == "corrected":
                (out / f"groups_{test_set}.txt").write_text(rep.table(f"{name} groups ({test_set})") + "\n",
                                                            encoding="utf-8")
    if any(s == "real" for s, _ in reports) and any(s == "simulated" for s, _ in reports):
        real = next(r for (s, _), r in reports.items() if s == "real")
        sim_mode = "corrected" if ("simulated", "corrected") in reports else modes[0]
        rows = disturbance_rows(real, reports[("simulated", sim_mode)])
        (out / "disturbance.txt").write_text("\n".join(rows) + "\n", encoding="utf-8")
        print("\n".join(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steamrec", description="Sequential recommender that corrects its input sequences")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("prepare", help="interaction log -> processed dataset")
    p.add_argument("log")
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("simulate", help="build the simulated (noisier) test set")
    p.add_argument("--dataset", required=True)
    common(p, out_required=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--dataset")
    p.add_argument("--variant", choices=["full", "dc_only", "ic_only", "recommender_only"])
    p.add_argument("--op-set", dest="op_set", choices=["full", "delete_keep", "insert_keep"])
    p.add_argument("--epochs", type=int)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("correct", help="correct sequences with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequences", required=True)
    p.add_argument("--op-set", dest="op_set", default="full", choices=["full", "delete_keep", "insert_keep"])
    p.add_argument("--force-op", dest="force_op", choices=sorted(FORCE_OPS), help=argparse.SUPPRESS)
    common(p)
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("evaluate", help="HR@k / MRR@k reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", action="append", choices=["raw", "corrected"])
    p.add_argument("--test-set", dest="test_set", action="append", choices=["real", "simulated"])
    p.add_argument("--op-set", dest="op_set", choices=["full", "delete_keep", "insert_keep"])
    common(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataError, ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"steamrec: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal failure: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
