"""Shared test utilities: finite differences and small fixtures."""

import numpy as np

from steamrec.autodiff import Tape, Tensor

STEP = 1e-5


def rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def analytic_grads(loss_fn, tensors):
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def numeric_grad(loss_fn, t, idx, h=STEP):
    old = t.data[idx]
    t.data[idx] = old + h
    up = float(loss_fn().data)
    t.data[idx] = old - h
    down = float(loss_fn().data)
    t.data[idx] = old
    return (up - down) / (2 * h)


def check_grads(loss_fn, tensors, rng=None, max_coords=None):
    """Max relative error between tape gradients and central differences.

    ``max_coords`` samples that many coordinates per tensor (all when None).
    """
    grads = analytic_grads(loss_fn, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        coords = list(np.ndindex(t.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in pick]
        for idx in coords:
            worst = max(worst, float(rel_error(g[idx], numeric_grad(loss_fn, t, idx))))
    return worst


def directional_error(loss_fn, tensors, rng, h=STEP):
    """Relative error of the directional derivative along a random unit direction."""
    grads = analytic_grads(loss_fn, tensors)
    dirs = [rng.standard_normal(t.shape) for t in tensors]
    norm = np.sqrt(sum((d * d).sum() for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum((g * d).sum() for g, d in zip(grads, dirs))
    olds = [t.data.copy() for t in tensors]
    for t, o, d in zip(tensors, olds, dirs):
        t.data = o + h * d
    up = float(loss_fn().data)
    for t, o, d in zip(tensors, olds, dirs):
        t.data = o - h * d
    down = float(loss_fn().data)
    for t, o in zip(tensors, olds):
        t.data = o
    return float(rel_error(analytic, (up - down) / (2 * h)))


def reconstruct(modified, ops, targets, eos):
    """Independent undo of a corruption: walk positions, drop delete, splice reversed runs."""
    out = []
    for pos in range(len(modified)):
        if ops[pos] == 1:
            continue
        if ops[pos] == 2:
            gen = targets[pos]
            assert gen[-1] == eos
            out += gen[:-1][::-1]
        out.append(modified[pos])
    return out


def param(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)
