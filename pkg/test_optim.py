"""Cosine schedule endpoints and AdamW update rules."""

import math

import numpy as np
import pytest

from app.errors import ConfigError, GradError
from app.optim import AdamW, AdamWState, CosineSchedule, adamw_step, lr_at
from app.tensor import Tensor


def test_schedule_endpoints_are_exact():
    schedule = CosineSchedule(1e-4, 1e-6, 1000)
    assert lr_at(schedule, 0) == 1e-4
    assert lr_at(schedule, 1000) == 1e-6


def test_schedule_midpoint():
    assert abs(lr_at(CosineSchedule(1e-4, 1e-6, 1000), 500) - 5.05e-5) < 1e-12


def test_schedule_is_nonincreasing():
    schedule = CosineSchedule(1e-3, 0.0, 97)
    values = [schedule.lr_at(s) for s in range(98)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_schedule_matches_closed_form():
    schedule = CosineSchedule(2e-3, 1e-5, 40)
    for step in range(1, 40):
        expected = 1e-5 + 0.5 * (2e-3 - 1e-5) * (1 + math.cos(math.pi * step / 40))
        assert schedule.lr_at(step) == pytest.approx(expected, rel=1e-14)


def test_schedule_rejects_out_of_range_steps():
    schedule = CosineSchedule(1e-4, 1e-6, 10)
    with pytest.raises(ConfigError):
        schedule.lr_at(11)
    with pytest.raises(ConfigError):
        schedule.lr_at(-1)


def test_schedule_rejects_inverted_range():
    with pytest.raises(ConfigError):
        CosineSchedule(1e-6, 1e-4, 10)


def test_zero_gradient_adamw_is_pure_decay(rng):
    start = rng.normal(size=(4, 3))
    param = Tensor(start, requires_grad=True)
    state = AdamWState(weight_decay=1e-4)
    expected = start.copy()
    lr = 1e-2
    for _ in range(50):
        param.zero_grad()
        adamw_step({"w": param}, state, lr)
        expected = expected * (1.0 - lr * 1e-4)
    np.testing.assert_array_equal(param.data, expected)


def test_first_adamw_step_moves_by_lr_in_gradient_sign():
    param = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    param.grad[...] = [0.3, -4.0, 1e-2]
    adamw_step({"w": param}, AdamWState(weight_decay=0.0), lr=0.1)
    # bias-corrected first step is g / (|g| + eps) ~ sign(g)
    np.testing.assert_allclose(param.data, [0.9, -1.9, 0.4], atol=1e-6)


def test_bias_excluded_from_decay():
    w = Tensor(np.ones(2), requires_grad=True, name="head.weight")
    b = Tensor(np.ones(2), requires_grad=True, name="head.bias")
    optimizer = AdamW({"head.weight": w, "head.bias": b}, weight_decay=0.5)
    optimizer.zero_grad()
    optimizer.step(lr=0.1)
    np.testing.assert_array_equal(b.data, [1.0, 1.0])
    np.testing.assert_allclose(w.data, [0.95, 0.95], rtol=0, atol=1e-15)


def test_step_counter_and_moments_advance():
    param = Tensor([0.0], requires_grad=True)
    state = AdamWState()
    for _ in range(3):
        param.grad[...] = 1.0
        adamw_step({"p": param}, state, lr=1e-3)
    assert state.t == 3
    np.testing.assert_allclose(state.m["p"], [1 - 0.9**3])
    np.testing.assert_allclose(state.v["p"], [1 - 0.999**3])


def test_missing_gradient_is_an_error():
    with pytest.raises(GradError, match="frozen"):
        adamw_step({"frozen": Tensor([1.0])}, AdamWState(), lr=1e-3)


def test_adamw_descends_a_quadratic_bowl():
    theta = Tensor(np.array([3.0, -2.0, 4.0, -5.0]), requires_grad=True)
    optimizer = AdamW({"theta": theta}, weight_decay=0.01)
    losses = []
    for _ in range(100):
        optimizer.zero_grad()
        theta.grad[...] = theta.data
        losses.append(0.5 * float(theta.data @ theta.data))
        optimizer.step(1e-2)
    losses.append(0.5 * float(theta.data @ theta.data))
    assert all(later < earlier for earlier, later in zip(losses, losses[1:]))
