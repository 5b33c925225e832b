"""Tensor core: forward values, backward rules, finite-difference oracle."""

import math

import numpy as np
import pytest

from asckit import tensor as T
from asckit.errors import ContractError, NumericError, ShapeError
from asckit.tensor import Tape, Tensor


def fd(f, x, h=1e-5, samples=None, rng=None):
    return T.finite_difference_check(f, x, h=h, samples=samples, rng=rng)


class TestMatmul:
    def test_identity_left(self):
        rng = np.random.default_rng(0)
        b = rng.standard_normal((3, 2))
        eye = Tensor(np.eye(3))
        out = T.matmul(eye, Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_hand_values(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data,
                                      [[19.0, 22.0], [43.0, 50.0]])

    def test_identity_associativity_bitwise(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((4, 4))
        b = rng.standard_normal((4, 3))
        eye = np.eye(4)
        direct = np.matmul(a, b)
        left = np.matmul(np.matmul(a, eye), b)
        right = np.matmul(a, np.matmul(eye, b))
        np.testing.assert_array_equal(direct, left)
        np.testing.assert_array_equal(direct, right)

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_of_sum_matches_column_sums(self):
        # d sum(A @ B) / dA = row-broadcast of column sums of B
        rng = np.random.default_rng(2)
        a = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        b = rng.standard_normal((5, 3))
        with Tape() as tape:
            loss = T.tsum(T.matmul(a, Tensor(b)))
            tape.backward(loss)
        expected = np.tile(b.sum(axis=1), (4, 1))
        np.testing.assert_allclose(a.grad, expected, rtol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        b = rng.standard_normal((5, 3))
        x = Tensor(rng.standard_normal((4, 5)))
        err = fd(lambda t: T.tsum(T.matmul(t, Tensor(b))), x)
        assert err < 1e-6


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_ten_classes(self):
        logits = Tensor(np.zeros((1, 10)))
        loss = T.softmax_cross_entropy(logits, np.array([3]))
        assert loss.item() == pytest.approx(math.log(10.0), abs=1e-12)

    def test_uniform_logits_two_classes(self):
        loss = T.softmax_cross_entropy(Tensor(np.zeros((1, 2))), np.array([0]))
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((3, 10)))
        y = np.array([1, 7, 4])
        err = fd(lambda t: T.softmax_cross_entropy(t, y), x)
        assert err < 1e-6

    def test_backward_is_softmax_minus_onehot_over_batch(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        y = np.array([0, 2, 3])
        with Tape() as tape:
            loss = T.softmax_cross_entropy(x, y)
            tape.backward(loss)
        z = x.data - x.data.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        onehot = np.eye(4)[y]
        np.testing.assert_allclose(x.grad, (p - onehot) / 3.0, rtol=1e-12)

    def test_nonfinite_logits_rejected(self):
        bad = Tensor(np.array([[0.0, np.inf]]))
        with pytest.raises(NumericError):
            T.softmax_cross_entropy(bad, np.array([0]))

    def test_out_of_range_target_rejected(self):
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(Tensor(np.zeros((1, 4))), np.array([4]))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            y = T.softmax(Tensor(rng.standard_normal((5, 10)) * 30)).data
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


class TestBackward:
    def test_grad_of_sum_is_ones(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]), requires_grad=True)
        with Tape() as tape:
            tape.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones(4))

    def test_grad_of_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            tape.backward(T.tsum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_disconnected_tensor_has_zero_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        other = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            tape.backward(T.tsum(T.mul(x, x)))
        np.testing.assert_array_equal(other.grad, np.zeros(3))

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(T.mul(x, x))
            tape.backward(loss)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_grad_reused_input(self):
        # y = x*x + x: grad = 2x + 1
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            tape.backward(T.tsum(T.add(T.mul(x, x), x)))
        np.testing.assert_array_equal(x.grad, [7.0])


class TestFiniteDifferenceCheck:
    def test_sum_error_exactly_zero(self):
        # dyadic values and a power-of-two step keep every float op exact
        x = Tensor(np.array([0.5, 0.25, -1.5]))
        assert fd(lambda t: T.tsum(t), x, h=2.0 ** -17) == 0.0

    def test_half_norm_squared(self):
        x = Tensor(np.array([3.0, 4.0]))
        err = fd(lambda t: T.mul(T.tsum(T.mul(t, t)), 0.5), x, h=2.0 ** -17)
        assert err == 0.0

    def test_composite_matmul_cross_entropy(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((6, 4))
        y = np.array([2, 0])
        x = Tensor(rng.standard_normal((2, 6)))
        err = fd(lambda t: T.softmax_cross_entropy(T.matmul(t, Tensor(w)), y), x)
        assert err < 1e-6

    def test_nan_propagates_as_failure(self):
        x = Tensor(np.array([1.0]))

        def bad(t):
            return T.mul(T.tsum(t), float("nan"))

        assert math.isnan(fd(bad, x))


ELEMENTWISE_OPS = [
    ("relu", lambda t: T.tsum(T.relu(t)), 0.3),
    ("leaky_relu", lambda t: T.tsum(T.leaky_relu(t)), 0.3),
    ("tanh", lambda t: T.tsum(T.tanh(t)), 0.0),
    ("sqrt", lambda t: T.tsum(T.sqrt(T.add(T.mul(t, t), 1.0))), 0.0),
    ("softmax", lambda t: T.tsum(T.mul(T.softmax(t), T.softmax(t))), 0.0),
    ("mean", lambda t: T.tmean(T.mul(t, t)), 0.0),
    ("transpose", lambda t: T.tsum(T.mul(T.transpose(t, (1, 0)), 2.0)), 0.0),
    ("reshape", lambda t: T.tsum(T.mul(T.reshape(t, (-1,)), T.reshape(t, (-1,)))), 0.0),
]


@pytest.mark.parametrize("name,func,shift", ELEMENTWISE_OPS, ids=[o[0] for o in ELEMENTWISE_OPS])
def test_op_gradients_over_many_seeds(name, func, shift):
    # shift keeps relu/leaky inputs away from the kink at 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 4))
        if shift:
            x = np.where(np.abs(x) < shift, x + 2 * shift, x)
        err = fd(func, Tensor(x), h=1e-5, samples=6, rng=rng)
        assert err < 1e-4, f"{name} seed {seed}: {err}"


def test_concat_gradient():
    rng = np.random.default_rng(8)
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = T.concat([a, b], axis=1)
        tape.backward(T.tsum(T.mul(out, out)))
    np.testing.assert_allclose(a.grad, 2 * a.data, rtol=1e-12)
    np.testing.assert_allclose(b.grad, 2 * b.data, rtol=1e-12)


def test_broadcast_add_gradient():
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    bias = Tensor(rng.standard_normal(3), requires_grad=True)
    with Tape() as tape:
        tape.backward(T.tsum(T.mul(T.add(x, bias), T.add(x, bias))))
    np.testing.assert_allclose(bias.grad, (2 * (x.data + bias.data)).sum(axis=0), rtol=1e-12)


def test_tensor_invariants():
    x = Tensor(np.zeros((2, 5)), requires_grad=True)
    assert x.data.size == 10
    assert x.grad.shape == x.shape
    x._accum_grad(np.ones((2, 5)))
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, np.zeros((2, 5)))
