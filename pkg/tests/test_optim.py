import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from steamrec.autodiff import ShapeError, Tensor
from steamrec.optim import AdamState, adam_step, clip_gradients, xavier_init


def test_xavier_single_value_bound():
    v = xavier_init(1, 1, np.random.default_rng(0))
    assert v.shape == (1, 1) and abs(v[0, 0]) <= math.sqrt(3)


def test_xavier_pooled_mean():
    rng = np.random.default_rng(1)
    pooled = np.concatenate([xavier_init(64, 64, rng).ravel() for _ in range(25)])
    assert pooled.size >= 10 ** 5
    assert abs(pooled.mean()) < 0.005


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 70), st.integers(1, 70), st.integers(0, 2 ** 32 - 1))
def test_xavier_strictly_inside_bound(rows, cols, seed):
    w = xavier_init(rows, cols, np.random.default_rng(seed))
    assert np.all(np.abs(w) < math.sqrt(6 / (rows + cols)))


def test_xavier_rejects_empty():
    with pytest.raises(ValueError):
        xavier_init(0, 3, np.random.default_rng(0))


def test_clip_values():
    (out,) = clip_gradients([np.array([7.2, -3.0, -9.0])], -5, 5)
    assert out.tolist() == [5.0, -3.0, -5.0]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6)))
def test_clip_range_and_idempotence(g):
    once = clip_gradients([g])[0]
    assert once.min() >= -5 and once.max() <= 5
    assert np.array_equal(clip_gradients([once])[0], once)


def test_clip_needs_ordered_range():
    with pytest.raises(ValueError):
        clip_gradients([np.zeros(2)], 5, -5)


def test_adam_zero_gradient_from_zero_state():
    p = Tensor(np.array([[1.0, -2.0]]))
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros((1, 2))], state)
    assert np.array_equal(p.data, [[1.0, -2.0]])
    assert state.step == 1
    # moments only decay afterwards
    state.m[0][:] = 0.5
    adam_step([p], [np.zeros((1, 2))], state)
    assert np.allclose(state.m[0], 0.45)


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([[0.0, 0.0, 0.0]]))
    state = AdamState.for_params([p], eps=0.0)
    adam_step([p], [np.array([[3.0, -0.2, 1e-4]])], state)
    assert np.allclose(p.data, [[-0.001, 0.001, -0.001]], atol=1e-15)


def test_adam_three_step_scalar_trace():
    # hand-unrolled reference, independent of the vectorised update
    lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
    x, m, v = 0.5, 0.0, 0.0
    grads = [0.2, -1.3, 0.7]
    ref = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        ref.append(x)
    p = Tensor(np.array([[0.5]]))
    state = AdamState.for_params([p])
    for g, want in zip(grads, ref):
        adam_step([p], [np.array([[g]])], state)
        assert abs(p.data[0, 0] - want) < 1e-12
    assert state.step == 3


def test_adam_shape_mismatch():
    p = Tensor(np.zeros((2, 2)))
    state = AdamState.for_params([p])
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros((2, 3))], state)
