import gc

import numpy as np
import pytest

from pcnet import ops
from pcnet.tensor import (DimensionError, Tape, Tensor, UsageError, current_tape, default_dtype,
                          get_default_dtype, no_grad, parameter)


def test_tensor_is_contiguous_copy():
    src = np.arange(12.0).reshape(3, 4).T
    t = Tensor(src)
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.shape == (4, 3)
    src[0, 0] = 99
    assert t.data[0, 0] == 0


def test_default_dtype_switch():
    assert get_default_dtype() is np.float32
    with default_dtype("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        with default_dtype("float16"):
            pass


def test_ops_outside_tape_do_not_record():
    x = parameter([1.0, 2.0])
    y = ops.scale(x, 2.0)
    assert y._tape is None
    with pytest.raises(UsageError):
        y.backward()


def test_tape_records_only_when_grad_needed():
    a, b = Tensor([1.0, 2.0]), parameter([3.0, 4.0])
    with Tape() as tape:
        ops.add(a, a)
        assert len(tape) == 0
        ops.add(a, b)
        assert len(tape) == 1


def test_no_grad_suspends_recording():
    x = parameter([1.0, -2.0])
    with Tape() as tape:
        with no_grad():
            assert current_tape() is None
            ops.relu(x)
        assert current_tape() is tape
    assert len(tape) == 0


def test_backward_simple_chain():
    # d/dx sum(3 * x * x) = 6x
    x = parameter([1.0, -2.0, 0.5], dtype=np.float64)
    with Tape() as tape:
        loss = ops.sum(ops.scale(ops.mul(x, x), 3.0))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0, -12.0, 3.0])


def test_backward_accumulates_on_reuse():
    x = parameter([2.0], dtype=np.float64)
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(x, x), x))
    tape.backward(loss)
    assert x.grad[0] == 5.0
    # a second backward adds on top; callers reset between steps
    with Tape() as tape:
        loss = ops.sum(x)
    tape.backward(loss)
    assert x.grad[0] == 6.0


def test_unreachable_parameter_gets_zero_grad():
    x, y = parameter([1.0]), parameter([2.0])
    with Tape() as tape:
        loss = ops.sum(x)
        ops.scale(y, 2.0)
    tape.backward(loss)
    assert x.grad[0] == 1.0
    np.testing.assert_array_equal(y.grad, [0.0])


def test_backward_needs_scalar():
    x = parameter([1.0, 2.0])
    with Tape() as tape:
        y = ops.scale(x, 2.0)
    with pytest.raises(UsageError):
        tape.backward(y)


def test_loss_from_other_tape_rejected():
    x = parameter([1.0])
    with Tape():
        loss = ops.sum(x)
    with pytest.raises(UsageError):
        Tape().backward(loss)


def test_tensor_backward_convenience():
    x = parameter([3.0], dtype=np.float64)
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
        loss.backward()
    assert x.grad[0] == 6.0
    assert len(tape) == 2


def test_dead_tape_detected():
    x = parameter([1.0])

    def make():
        with Tape():
            return ops.sum(x)

    loss = make()
    gc.collect()
    with pytest.raises(UsageError):
        loss.backward()


def test_operator_sugar():
    a = Tensor([1.0, 2.0], dtype=np.float64)
    b = Tensor([3.0, 5.0], dtype=np.float64)
    np.testing.assert_array_equal((a + b).data, [4.0, 7.0])
    np.testing.assert_array_equal((b - a).data, [2.0, 3.0])
    np.testing.assert_array_equal((a * b).data, [3.0, 10.0])
    np.testing.assert_array_equal((a * 2).data, [2.0, 4.0])
    np.testing.assert_array_equal((-a).data, [-1.0, -2.0])


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        ops.add(Tensor([1.0, 2.0]), Tensor([1.0]))
