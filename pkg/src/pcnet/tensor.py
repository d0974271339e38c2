"""Dense tensor value type and the gradient tape.

A :class:`Tensor` wraps a contiguous row-major numpy buffer. Operations in
:mod:`pcnet.ops` record themselves on the innermost active :class:`Tape` when
any of their inputs requires a gradient; ``tape.backward(loss)`` then replays
the recording in reverse.
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from typing import Callable, Iterator, Sequence

import numpy as np

_state = threading.local()
_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UsageError(RuntimeError):
    """An operation was invoked outside its contract."""


def set_default_dtype(dtype) -> None:
    """Set the precision used when tensors are created without an explicit dtype."""
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported precision {dtype!r}; expected float32 or float64")
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = dtype or _default_dtype
        self.data = np.ascontiguousarray(np.array(data, dtype=dtype))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: weakref.ref | None = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(array)
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        tape = self._tape() if self._tape is not None else None
        if tape is None:
            raise UsageError("tensor was not produced on a live gradient tape")
        tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the op implementations live in pcnet.ops
    def __add__(self, other):
        from pcnet import ops
        return ops.add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        from pcnet import ops
        return ops.sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        from pcnet import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from pcnet import ops
        return ops.scale(self, -1.0)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value), dtype=like.dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order of the
    computation graph. Backward visits every node at most once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        output._tape = weakref.ref(self)
        self.nodes.append(_Node(inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is None or loss._tape() is not self:
            raise UsageError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            _accumulate(node.output, g)
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left belongs to leaves (tensors not produced on this tape)
        by_id = {id(t): t for node in self.nodes for t in node.inputs}
        for key, g in grads.items():
            if key in by_id:
                _accumulate(by_id[key], g)
        for t in by_id.values():
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording: ops evaluated inside never join a tape."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()
