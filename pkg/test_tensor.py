"""Reverse-mode differentiation: gradient checks per op plus tape and domain contracts."""

import numpy as np
import pytest

from app import tensor as T
from app.errors import DimensionError, DomainError, GradError
from app.tensor import Tape, Tensor

INSTANCES = 20


def weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    """Reduce an arbitrary output to a scalar with fixed random weights."""
    return T.sum(T.mul(out, Tensor(weights)))


def test_matmul_and_bias_gradients(grad_check, rng):
    for _ in range(INSTANCES):
        a, b, bias = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
        w = rng.normal(size=(3, 5))
        grad_check(lambda ts: weighted(T.add(T.matmul(ts[0], ts[1]), ts[2]), w), [a, b, bias])


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_elementwise_gradients(grad_check, rng, op):
    for _ in range(INSTANCES):
        a, b, w = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        grad_check(lambda ts: weighted(T.elementwise(op, ts[0], ts[1]), w), [a, b])


@pytest.mark.parametrize("op", ["relu", "gelu", "exp"])
def test_unary_gradients(grad_check, rng, op):
    for _ in range(INSTANCES):
        a, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        grad_check(lambda ts: weighted(T.elementwise(op, ts[0]), w), [a])


def test_log_and_scale_gradients(grad_check, rng):
    for _ in range(INSTANCES):
        a, w = rng.uniform(0.5, 2.0, size=(3, 4)), rng.normal(size=(3, 4))
        grad_check(lambda ts: weighted(T.scale(T.log(ts[0]), 0.7), w), [a])


def test_reductions_and_reshape_gradients(grad_check, rng):
    for _ in range(INSTANCES):
        a, w = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 12))
        grad_check(lambda ts: T.add(weighted(T.flatten(ts[0]), w), T.mean(T.reshape(ts[0], (4, 6)))), [a])


@pytest.mark.parametrize("temperature", [1.0, 2.0, 4.0])
def test_softmax_family_gradients(grad_check, rng, temperature):
    for _ in range(INSTANCES):
        a, w = 3 * rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        grad_check(lambda ts: weighted(T.softmax(ts[0], temperature), w), [a])
        grad_check(lambda ts: weighted(T.log_softmax(ts[0], temperature), w), [a])


def test_soft_cross_entropy_gradient(grad_check, rng):
    for _ in range(INSTANCES):
        a, target = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        grad_check(lambda ts: T.soft_cross_entropy(ts[0], target, 2.0), [a])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(grad_check, rng, stride, padding):
    for _ in range(INSTANCES):
        x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        out_shape = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).shape
        weights = rng.normal(size=out_shape)
        grad_check(lambda ts: weighted(T.conv2d(ts[0], ts[1], ts[2], stride, padding), weights), [x, w, b])


def test_avg_pool_gradient(grad_check, rng):
    for _ in range(INSTANCES):
        x, w = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 3, 2, 2))
        grad_check(lambda ts: weighted(T.avg_pool2d(ts[0], 2), w), [x])


def test_conv2d_matches_naive_loop(rng):
    x, w, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                expected[0, o, i, j] = (xp[0, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_shared_input_accumulates_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.mul(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_twice_accumulates_until_zeroed():
    x = Tensor([1.0, -1.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = T.sum(T.scale(x, 3.0))
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    T.zero_grad([x])
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        with T.no_grad():
            y = T.exp(x)
    assert len(tape) == 0
    assert not y.requires_grad


def test_untracked_inputs_are_not_recorded():
    with Tape() as tape:
        T.add(Tensor([1.0]), Tensor([2.0]))
    assert len(tape) == 0


def test_backward_rejects_non_scalar_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(GradError, match="scalar"):
        tape.backward(y)


def test_backward_rejects_loss_from_another_tape():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = T.sum(x)
    with pytest.raises(GradError, match="this tape"):
        Tape().backward(loss)


def test_log_domain_error_names_index():
    with pytest.raises(DomainError, match=r"index \(1, 0\)"):
        T.log(Tensor([[1.0, 2.0], [0.0, 3.0]]))


def test_shape_mismatch_is_a_value_error():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_relu_propagates_nan_and_blocks_its_gradient():
    x = Tensor([np.nan, -1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = T.relu(x)
        loss = T.sum(T.mul(out, Tensor([0.0, 1.0, 1.0])))
    assert np.isnan(out.data[0])
    np.testing.assert_array_equal(out.data[1:], [0.0, 2.0])
    tape.backward(loss)
    assert x.grad[0] == 0.0 and x.grad[2] == 1.0


def test_scalar_results_are_zero_dimensional(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    assert T.sum(a).shape == ()
    assert T.mean(a).shape == ()
    assert T.soft_cross_entropy(a, rng.normal(size=(3, 4)), 2.0).shape == ()


def test_backward_is_linear_in_the_loss(rng):
    for _ in range(INSTANCES):
        x_data, w1, w2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        a, b = rng.normal(size=2)

        def grad_of(build):
            x = Tensor(x_data, requires_grad=True)
            with Tape() as tape:
                loss = build(x)
            tape.backward(loss)
            return x.grad

        first = lambda x: weighted(T.gelu(x), w1)
        second = lambda x: weighted(T.softmax(x, 2.0), w2)
        blended = grad_of(lambda x: T.add(T.scale(first(x), a), T.scale(second(x), b)))
        np.testing.assert_allclose(blended, a * grad_of(first) + b * grad_of(second), rtol=1e-10, atol=1e-12)
