"""Train variants on the Markov dataset and score them on fresh noisy users.

    python demos/synthetic_experiment.py --epochs 50 --variants full recommender_only
"""

import argparse

from steamrec.synthetic import run_synthetic

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=50)
parser.add_argument("--batch-size", type=int, default=16)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--dropout", type=float, default=0.5)
parser.add_argument("--variants", nargs="+", default=["full", "dc_only", "ic_only", "recommender_only"])
args = parser.parse_args()

for variant in args.variants:
    run = run_synthetic(variant, seed=args.seed, epochs=args.epochs, batch_size=args.batch_size,
                        dropout=args.dropout,
                        log_epoch=lambda rec: print("  " + rec.line(), flush=True))
    print(f"{variant}: HR@10 {run.hr10:.2f} (raw inputs {run.hr10_raw:.2f}), {run.seconds:.0f}s")
    if run.delete_precision is not None:
        print(f"  delete precision {run.delete_precision:.3f}  recall {run.delete_recall:.3f}")
        ops = run.report.op_stats
        print(f"  changed {ops['pct_changed']:.2f}%  delete {ops['pct_delete']:.2f}%  insert {ops['pct_insert']:.2f}%")
