# tests/test_autograd.py

import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

import numpy as np
import pytest

from services import autograd as ag
from services.autograd import Tensor, default_dtype, new_tape, no_grad, parameter
from services.mac_counter import MacCounter
from utils.error_handler import ContractError, DimensionError, IndexOutOfRangeError


def test_broadcast_add_and_mul_gradients():
    with default_dtype(np.float64), new_tape():
        a = parameter(np.arange(6.0).reshape(2, 3))
        b = parameter(np.array([1.0, -2.0, 0.5]))
        loss = ag.sum(ag.mul(ag.add(a, b), a))
        loss.backward()

    np.testing.assert_allclose(a.grad, 2 * a.data + b.data)
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0))


def test_matmul_gradient_matches_finite_differences(numeric_grad):
    rng = np.random.default_rng(0)
    with default_dtype(np.float64):
        a = parameter(rng.normal(size=(3, 4)))
        b = parameter(rng.normal(size=(4, 2)))
        weights = rng.normal(size=(3, 2))

        def loss_value():
            return float(np.sum((a.data @ b.data) * weights))

        with new_tape():
            loss = ag.sum(ag.mul(ag.matmul(a, b), weights))
            loss.backward()

    np.testing.assert_allclose(a.grad, numeric_grad(loss_value, a.data), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(b.grad, numeric_grad(loss_value, b.data), rtol=1e-6, atol=1e-8)


def test_matmul_records_macs():
    with MacCounter() as counter, no_grad():
        ag.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5))))
    assert counter.total() == 3 * 4 * 5


def test_elementwise_gradients(numeric_grad):
    rng = np.random.default_rng(1)
    with default_dtype(np.float64):
        x = parameter(rng.normal(size=(5,)))
        for op in (ag.exp, ag.sigmoid, ag.silu, ag.softplus):
            x.zero_grad()
            with new_tape():
                ag.sum(op(x)).backward()
            expected = numeric_grad(lambda: float(op(Tensor(x.data)).data.sum()), x.data)
            np.testing.assert_allclose(x.grad, expected, rtol=1e-6, atol=1e-8, err_msg=op.__name__)


def test_softplus_stays_positive_in_float32():
    out = ag.softplus(Tensor(np.array([-200.0, -1000.0, -1e30, 0.0])))
    assert out.data.dtype == np.float32
    assert np.all(out.data > 0)
    assert out.data[3] == pytest.approx(np.log(2.0))


def test_gather_rows_accumulates_repeated_indices():
    with default_dtype(np.float64), new_tape():
        x = parameter(np.arange(6.0).reshape(3, 2))
        ag.sum(ag.gather_rows(x, [0, 0, 2])).backward()
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_scatter_rows_is_adjoint_of_gather():
    with default_dtype(np.float64), new_tape():
        base = parameter(np.ones((4, 2)))
        rows = parameter(np.array([[5.0, 6.0], [7.0, 8.0]]))
        out = ag.scatter_rows(base, [3, 1], rows)
        ag.sum(ag.mul(out, np.arange(8.0).reshape(4, 2))).backward()

    np.testing.assert_array_equal(out.data, [[1, 1], [7, 8], [1, 1], [5, 6]])
    np.testing.assert_array_equal(rows.grad, [[6.0, 7.0], [2.0, 3.0]])
    np.testing.assert_array_equal(base.grad, [[0, 1], [0, 0], [4, 5], [0, 0]])


def test_scatter_rows_rejects_duplicate_indices():
    with pytest.raises(ContractError):
        ag.scatter_rows(Tensor(np.zeros((3, 2))), [1, 1], Tensor(np.ones((2, 2))))


def test_gather_rows_out_of_range():
    with pytest.raises(IndexOutOfRangeError) as exc_info:
        ag.gather_rows(Tensor(np.zeros((3, 2))), [0, 3])
    assert exc_info.value.index == 3
    assert exc_info.value.size == 3


def test_second_backward_through_same_graph_raises():
    with new_tape():
        x = parameter(np.ones(3))
        loss = ag.sum(ag.mul(x, 2.0))
        loss.backward()
        with pytest.raises(ContractError) as exc_info:
            loss.backward()
    assert exc_info.value.error_code == "TAPE_CONSUMED"


def test_backward_needs_scalar_loss():
    with new_tape():
        y = ag.mul(parameter(np.ones(3)), 2.0)
        with pytest.raises(ContractError):
            y.backward()


def test_leaf_gradients_accumulate_across_passes():
    x = parameter(np.array([1.0, 2.0]))
    for _ in range(2):
        with new_tape():
            ag.sum(ag.mul(x, 3.0)).backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_no_grad_records_nothing():
    x = parameter(np.ones(4))
    with new_tape() as tape, no_grad():
        y = ag.exp(x)
    assert len(tape) == 0
    assert not y.requires_grad


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError) as exc_info:
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert exc_info.value.shapes == ((2, 3), (2, 3))


def test_argsort_is_stable():
    np.testing.assert_array_equal(ag.argsort([1.0, 0.0, 1.0, 0.0]), [1, 3, 0, 2])


def test_wide_sum_keeps_dtype():
    values = np.full(10_000, 0.1, dtype=np.float32)
    total = ag.wide_sum(values)
    assert total.dtype == np.float32
    assert abs(float(total) - 1000.0) < 1e-3
