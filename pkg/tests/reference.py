"""Straight-line numpy forward pass, one sequence at a time, for loss oracles.

Shares nothing with the package except the parameter arrays.
"""

import math

import numpy as np


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-12) * g + b


def gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def block(h, w, causal=False):
    d = w.wq.data
    q = h @ d + w.bq.data
    k = h @ w.wk.data + w.bk.data
    v = h @ w.wv.data + w.bv.data
    n = len(h)
    scores = q @ k.T / math.sqrt(q.shape[1])
    if causal:
        scores = np.where(np.tril(np.ones((n, n), bool)), scores, -np.inf)
    att = softmax(scores) @ v @ w.wo.data + w.bo.data
    h = layer_norm(h + att, w.ln1_g.data, w.ln1_b.data)
    ff = gelu(h @ w.w1.data + w.b1.data) @ w.w2.data + w.b2.data
    return layer_norm(h + ff, w.ln2_g.data, w.ln2_b.data)


def encode(seq, p):
    h = p.item_emb.data[seq] + p.pos_emb.data[1:len(seq) + 1]
    for w in p.encoder:
        h = block(h, w)
    return h


def nll(logits, target):
    z = logits - logits.max()
    return -(z[target] - math.log(np.exp(z).sum()))


def corrector_loss(sample, p):
    h = encode(sample.modified, p)
    ops = sum(nll(p.op_proj.data @ h[t], o) for t, o in enumerate(sample.ops))
    ins = 0.0
    for pos, target in sample.inserted_targets.items():
        rows = [h[pos] + p.pos_emb.data[1]]
        for j, item in enumerate(target[:-1]):
            rows.append(p.item_emb.data[item] + p.pos_emb.data[j + 2])
        g = np.array(rows)
        for w in p.generator:
            g = block(g, w, causal=True)
        ins += sum(nll(p.item_emb.data @ g[n], item) for n, item in enumerate(target))
    return ops, ins


def masked_loss(masked, p):
    h = encode(masked.masked, p)
    for w in p.recommender:
        h = block(h, w)
    return sum(nll(p.item_emb.data @ h[t], item) for t, item in masked.targets.items())
