"""Corrupt a short sequence, show the labels, then undo the corruption."""

import numpy as np

from steamrec.data import CorruptionConfig, Op, Vocab, apply_operations, corrupt_sequence

vocab = Vocab(30)
raw = [3, 7, 11, 15, 19, 23, 27]
rng = np.random.default_rng(4)
sample = corrupt_sequence(raw, CorruptionConfig(), vocab, rng)

print("raw      ", raw)
print("modified ", sample.modified)
for pos, (item, op) in enumerate(zip(sample.modified, sample.ops)):
    extra = ""
    if op == Op.INSERT:
        # targets are stored nearest-first and end with eos
        extra = f"  restore {sample.inserted_targets[pos][:-1]} (reversed)"
    print(f"  {pos:2d} item {item:3d}  {Op(op).name.lower():6s}{extra}")

runs = {p: t[:-1] for p, t in sample.inserted_targets.items()}
print("restored ", apply_operations(sample.modified, sample.ops, runs))
