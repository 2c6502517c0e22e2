import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridrec import dense_nn
from hybridrec.core import Minibatch
from hybridrec.dense_nn import DenseModel, auc, backward, bce_loss, forward, grad_check, sgd_step
from hybridrec.errors import DivergenceError, InternalConsistencyError, UndefinedMetricError


def reference_forward(model, x):
    """Straight-line float64 forward pass written independently of the library."""
    h = np.asarray(x, np.float64)
    n_layers = len(model.weights)
    for i in range(n_layers):
        w = model.weights[i].astype(np.float64)
        b = model.biases[i].astype(np.float64)
        z = np.array([[sum(w[o, j] * h[r, j] for j in range(w.shape[1])) + b[o] for o in range(w.shape[0])]
                      for r in range(h.shape[0])])
        h = 1.0 / (1.0 + np.exp(-z)) if i == n_layers - 1 else np.where(z > 0, z, 0.0)
    return h[:, 0]


def test_zero_model_predicts_half():
    m = DenseModel.zeros([6, 4, 1])
    p, _ = forward(m, np.random.default_rng(0).normal(size=(5, 6)))
    assert np.allclose(p, 0.5)


def test_single_linear_layer_is_logistic():
    m = DenseModel([np.array([[1.0, 0.0]])], [np.zeros(1)])
    x = np.array([[0.3, 9.0], [-2.0, 1.0]])
    p, _ = forward(m, x)
    assert np.allclose(p, 1 / (1 + np.exp(-x[:, 0])))


def test_forward_matches_reference():
    m = DenseModel.init([7, 5, 1], seed=0, dtype=np.float64)
    x = np.random.default_rng(0).normal(size=(6, 7))
    p, _ = forward(m, x)
    assert np.allclose(p, reference_forward(m, x), rtol=1e-12, atol=0)


def test_bce_examples():
    assert bce_loss([0.5], [1.0]) == pytest.approx(math.log(2))
    assert bce_loss([1.0, 0.0], [1.0, 0.0]) <= 1.2e-7
    assert bce_loss([0.9, 0.1], [1.0, 0.0]) == pytest.approx(0.10536, abs=1e-5)


def test_backward_zero_model():
    m = DenseModel.zeros([4, 3, 1], np.float64)
    x = np.zeros((4, 4))
    y = np.array([1.0, 0.0, 1.0, 1.0])
    _, cache = forward(m, x)
    g = backward(m, x, cache, y)
    assert all(not w.any() for w in g.weights)
    assert g.biases[-1][0] == pytest.approx(np.mean(0.5 - y))


def test_backward_duplicate_sample():
    m = DenseModel.init([6, 4, 1], seed=3, dtype=np.float64)
    x1 = np.random.default_rng(1).normal(size=(1, 6))
    x2 = np.vstack([x1, x1])
    _, c1 = forward(m, x1)
    g1 = backward(m, x1, c1, np.array([1.0]))
    _, c2 = forward(m, x2)
    g2 = backward(m, x2, c2, np.array([1.0, 1.0]))
    for a, b in zip(g1.dense(), g2.dense()):
        assert np.allclose(a, b, rtol=1e-12)
    # per-sample input gradients carry the 1/n of the mean loss
    assert np.allclose(g2.embedding[0], g2.embedding[1])


def test_backward_rejects_stale_cache():
    m = DenseModel.init([3, 1], seed=0)
    x = np.ones((2, 3), np.float32)
    _, cache = forward(m, x)
    sgd_step(m, [np.zeros_like(p) for p in m.params()], 0.1)
    with pytest.raises(InternalConsistencyError):
        backward(m, x, cache, np.ones(2))


def test_grad_check_zero_model():
    m = DenseModel.zeros([5, 3, 1], np.float64)
    assert grad_check(m, np.zeros((4, 5)), np.array([0.0, 1.0, 1.0, 0.0])) <= 1e-8


def random_model(dims, seed):
    """Random weights and biases; zero biases put ReLU inputs exactly on the kink
    for samples whose previous layer is all zero, where differences are one-sided."""
    m = DenseModel.init(dims, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 10_000)
    for b in m.biases:
        b[:] = rng.normal(0, 0.1, size=b.shape)
    return m


def test_grad_check_seed0_batch8():
    m = random_model([10, 8, 4, 1], 0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 10))
    y = (rng.random(8) < 0.5).astype(np.float64)
    assert grad_check(m, x, y, include_inputs=False) <= 1e-4
    assert grad_check(m, x, y, include_inputs=True) <= 1e-4


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc([0.3, 0.3, 0.7], [0, 1, 1]) == 0.75
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


def brute_auc(p, y):
    pos = [a for a, l in zip(p, y) if l]
    neg = [a for a, l in zip(p, y) if not l]
    total = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return total / (len(pos) * len(neg))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=300))
def test_auc_matches_pairwise(pairs):
    p = [a / 20 for a, _ in pairs]
    y = [int(b) for _, b in pairs]
    if len(set(y)) < 2:
        return
    assert auc(p, y) == pytest.approx(brute_auc(p, y), abs=1e-12)


def test_auc_large_random(rng):
    p = rng.random(1000).round(2)
    y = rng.random(1000) < 0.3
    assert auc(p, y) == pytest.approx(brute_auc(p, y), abs=1e-12)


def test_sgd_step_examples():
    m = DenseModel([np.array([[1.0]])], [np.array([0.0])])
    sgd_step(m, [np.array([[0.5]]), np.array([0.0])], 0.1)
    assert m.weights[0][0, 0] == pytest.approx(0.95)
    before = m.flat().copy()
    sgd_step(m, [np.zeros((1, 1)), np.zeros(1)], 0.1)
    sgd_step(m, [np.ones((1, 1)), np.ones(1)], 0.0)
    assert np.array_equal(m.flat(), before)
    with pytest.raises(DivergenceError):
        sgd_step(m, [np.array([[np.nan]]), np.zeros(1)], 0.1)


def test_adam_first_step_moves_by_lr():
    m = DenseModel([np.array([[1.0, -1.0]])], [np.array([0.0])])
    opt = dense_nn.Adam(0.01)
    opt.step(m, [np.array([[2.0, -3.0]]), np.array([0.5])])
    # bias-corrected first Adam step is lr * sign(g)
    assert np.allclose(m.weights[0], [[0.99, -0.99]], atol=1e-7)
    assert np.allclose(m.biases[0], [-0.01], atol=1e-7)


def test_permutation_invariance(rng):
    m = DenseModel.init([6, 4, 1], seed=2)
    x = rng.normal(size=(16, 6)).astype(np.float32)
    y = (rng.random(16) < 0.5).astype(np.float32)
    perm = rng.permutation(16)
    _, c = forward(m, x)
    g = backward(m, x, c, y)
    _, cp = forward(m, x[perm])
    gp = backward(m, x[perm], cp, y[perm])
    # same samples in a different order: per-sample grads follow the permutation
    assert np.allclose(gp.embedding.reshape(16, -1), g.embedding.reshape(16, -1)[perm], rtol=1e-6, atol=1e-9)


def test_loss_decreases_on_separable_toy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 4))
    y = (x @ np.array([1.0, -2.0, 0.5, 0.0]) > 0).astype(np.float64)
    m = DenseModel.init([4, 8, 1], seed=0, dtype=np.float64)
    losses = []
    for _ in range(50):
        p, cache = forward(m, x)
        losses.append(bce_loss(p, y))
        sgd_step(m, backward(m, x, cache, y).dense(), 0.05)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_grad_check_over_random_models():
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(100):
        dims = [int(rng.integers(2, 7)), int(rng.integers(2, 6)), 1]
        m = random_model(dims, trial)
        x = rng.normal(size=(int(rng.integers(1, 5)), dims[0]))
        y = (rng.random(len(x)) < 0.5).astype(np.float64)
        worst = max(worst, grad_check(m, x, y))
    assert worst <= 1e-4


def test_minibatch_input_layout():
    mb = Minibatch(np.arange(2, dtype=np.uint64), np.arange(12, dtype=np.float32).reshape(2, 2, 3),
                   np.full((2, 1), -1.0, np.float32), np.zeros(2, np.float32))
    m = DenseModel.init([7, 1], seed=0)
    _, cache = forward(m, mb)
    g = backward(m, mb, cache, mb.labels)
    assert g.embedding.shape == (2, 2, 3) and g.non_id.shape == (2, 1)
