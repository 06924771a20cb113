import sys
import os
import unittest

# Add project root to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np
import pytest

from src.errors import GraphCycle, ShapeMismatch
from src.ml import autograd as ag
from src.ml.autograd import Tensor, backward, grads_for, parameter


def numeric_grad(fn, value, eps=1e-6):
    """Central differences of the scalar fn(array) around `value`."""
    value = np.array(value, dtype=np.float64)
    grad = np.zeros_like(value)
    for idx in np.ndindex(value.shape):
        plus, minus = value.copy(), value.copy()
        plus[idx] += eps
        minus[idx] -= eps
        grad[idx] = (fn(plus) - fn(minus)) / (2 * eps)
    return grad


def check_op(op, *shapes, seed=0):
    """
    Differentiates bce(op(*inputs)) w.r.t. every input analytically and
    numerically and compares the results.
    """
    rng = np.random.default_rng(seed)
    values = [rng.standard_normal(s) for s in shapes]
    out_shape = op(*[Tensor(v) for v in values]).shape
    target = (rng.random(out_shape) < 0.5).astype(np.float64)

    def loss_of(vals):
        return ag.bce_with_logits(op(*[Tensor(v) for v in vals]), target).item()

    params = [parameter(v) for v in values]
    grads = backward(ag.bce_with_logits(op(*params), target))
    for k, p in enumerate(params):
        def f(x, k=k):
            vals = list(values)
            vals[k] = x
            return loss_of(vals)
        np.testing.assert_allclose(grads[p.id], numeric_grad(f, values[k]), rtol=1e-5, atol=1e-8)


class TestOpGradients(unittest.TestCase):

    def test_elementwise(self):
        check_op(ag.add, (3, 4), (3, 4))
        check_op(ag.sub, (3, 4), (3, 4))
        check_op(lambda x: ag.scale(x, -2.5), (5,))
        check_op(ag.sigmoid, (2, 3))

    def test_conv2d(self):
        check_op(ag.conv2d, (2, 4, 4), (3, 2, 3, 3), (3,))
        check_op(ag.conv2d, (3, 5, 5), (1, 3, 1, 1), (1,), seed=1)

    def test_linear_and_pooling(self):
        check_op(ag.linear, (4,), (3, 4), (3,))
        check_op(ag.mean_pool, (2, 3, 3))

    def test_indexing(self):
        check_op(lambda x: ag.select_channel(x, 1), (3, 2, 2))
        check_op(lambda x: ag.take(x, [4, 5, 6, 7]), (8,))

    def test_losses(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal(5)
        p = parameter(logits)
        g = backward(ag.softmax_cross_entropy(p, 2))[p.id]
        numeric = numeric_grad(lambda x: ag.softmax_cross_entropy(Tensor(x), 2).item(), logits)
        np.testing.assert_allclose(g, numeric, rtol=1e-5, atol=1e-8)

        pred = np.array([0.2, -0.4, 2.0, -3.0])
        target = np.zeros(4)
        p = parameter(pred)
        g = backward(ag.smooth_l1(p, target))[p.id]
        np.testing.assert_allclose(g, [0.2, -0.4, 1.0, -1.0])
        self.assertAlmostEqual(ag.smooth_l1(Tensor(pred), target).item(), 0.02 + 0.08 + 1.5 + 2.5)

    def test_relu(self):
        x = parameter(np.array([-1.0, 0.5, 2.0]))
        g = backward(ag.bce_with_logits(ag.relu(x), np.ones(3)))[x.id]
        self.assertEqual(g[0], 0.0)
        self.assertTrue(np.all(g[1:] < 0))


def test_bce_matches_naive_formula():
    x = np.array([-2.0, 0.0, 3.0])
    y = np.array([0.0, 1.0, 1.0])
    s = 1 / (1 + np.exp(-x))
    naive = -np.mean(y * np.log(s) + (1 - y) * np.log(1 - s))
    assert ag.bce_with_logits(Tensor(x), y).item() == pytest.approx(naive, rel=1e-12)
    assert ag.bce_with_logits(Tensor(np.zeros(4)), np.ones(4)).item() == pytest.approx(np.log(2))


def test_bce_on_probability_clips_without_gradient():
    p = parameter(np.array([0.0, 0.5]))
    loss = ag.bce_on_probability(p, np.array([1.0, 1.0]))
    assert np.isfinite(loss.item())
    g = backward(loss)[p.id]
    assert g[0] == 0.0
    assert g[1] == pytest.approx(-1.0)


def test_gradients_accumulate_over_shared_inputs():
    x = parameter(np.array(1.5))
    loss = ag.add(ag.scale(x, 2.0), ag.scale(x, 3.0))
    assert backward(loss)[x.id] == pytest.approx(5.0)
    assert x.grad == pytest.approx(5.0)


def test_stop_gradient_blocks_flow():
    x = parameter(np.array(0.3))
    loss = ag.add(ag.sigmoid(ag.stop_gradient(x)), ag.scale(x, 2.0))
    assert backward(loss)[x.id] == pytest.approx(2.0)


def test_grads_for_fills_unused_tensors_with_zeros():
    x = parameter(np.ones(2), name="x")
    unused = parameter(np.ones(3), name="unused")
    grads = grads_for(backward(ag.bce_with_logits(x, np.ones(2))), {"x": x, "unused": unused})
    assert grads["unused"].shape == (3,)
    assert not grads["unused"].any()


def test_parents_created_later_are_a_cycle():
    a = parameter(np.array(1.0))
    b = ag.scale(a, 2.0)
    later = parameter(np.array(3.0))
    b.parents = (later,)
    with pytest.raises(GraphCycle):
        backward(b)


def test_non_scalar_loss_is_rejected():
    with pytest.raises(ShapeMismatch):
        backward(parameter(np.ones(3)))


def test_non_finite_values_are_rejected():
    with pytest.raises(FloatingPointError):
        Tensor(np.array([1.0, np.inf]))
    with pytest.raises(FloatingPointError):
        Tensor(np.nan)


def test_shape_checks():
    with pytest.raises(ShapeMismatch):
        ag.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeMismatch):
        ag.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeMismatch):
        ag.bce_with_logits(Tensor(np.ones(2)), np.ones(3))


def test_kink_tape_records_relu_patterns():
    with ag.record_kinks() as tape:
        ag.relu(Tensor(np.array([-1.0, 1.0])))
        ag.smooth_l1(Tensor(np.array([0.5, 3.0])), np.zeros(2))
    assert [t.tolist() for t in tape] == [[False, True], [True, False]]
    ag.relu(Tensor(np.array([1.0])))
    assert len(tape) == 2
