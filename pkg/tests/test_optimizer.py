# tests/test_optimizer.py

import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

import numpy as np
import pytest

from services import autograd as ag
from services.autograd import default_dtype, new_tape, parameter
from services.optimizer import AdamState


def test_first_adam_step_moves_by_learning_rate():
    with default_dtype(np.float64):
        w = parameter(np.array([1.0, -2.0, 3.0]))
        w.grad = np.array([0.5, -4.0, 0.0])
        optimizer = AdamState({"w": w}, lr=0.1)
        optimizer.step()
    # bias-corrected first step is lr * sign(grad) for nonzero gradients
    np.testing.assert_allclose(w.data, [0.9, -1.9, 3.0], rtol=1e-6)


def test_parameters_without_gradient_are_skipped():
    a = parameter(np.ones(2))
    b = parameter(np.ones(2))
    a.grad = np.ones(2, dtype=np.float32)
    AdamState({"a": a, "b": b}, lr=0.01).step()
    assert np.all(a.data < 1.0)
    np.testing.assert_array_equal(b.data, 1.0)


def test_adam_minimizes_a_quadratic():
    with default_dtype(np.float64):
        w = parameter(np.array([3.0, -2.0]))
        target = np.array([0.5, 1.5])
        optimizer = AdamState({"w": w}, lr=0.05)
        for _ in range(1000):
            with new_tape():
                diff = ag.sub(w, target)
                ag.sum(ag.mul(diff, diff)).backward()
            optimizer.step()
            optimizer.zero_grad()
    np.testing.assert_allclose(w.data, target, atol=1e-2)
    assert w.grad is None


def test_step_counter_advances():
    w = parameter(np.zeros(1))
    optimizer = AdamState({"w": w}, lr=0.1)
    for _ in range(3):
        w.grad = np.ones(1, dtype=np.float32)
        optimizer.step()
    assert optimizer.step_count == 3
    assert w.data[0] == pytest.approx(-0.3, rel=1e-5)


def test_zero_gradients_leave_parameters_unchanged():
    w = parameter(np.array([0.25, -1.5, 4.0]))
    before = w.data.copy()
    optimizer = AdamState({"w": w}, lr=0.1)
    for _ in range(3):
        w.grad = np.zeros(3, dtype=np.float32)
        optimizer.step()
    np.testing.assert_array_equal(w.data, before)
    np.testing.assert_array_equal(optimizer.m["w"], 0.0)
