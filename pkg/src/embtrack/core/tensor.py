"""Dense tensors and the gradient tape.

A :class:`Tensor` wraps a numpy array. Operations executed while a
:class:`Tape` is active, and that touch at least one tensor with
``requires_grad=True``, are appended to that tape together with a closure
mapping the output adjoint to input adjoints. :meth:`Tape.backward` replays
the record in reverse.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_state = threading.local()
_DEFAULT_DTYPE = [np.float64]


def set_default_dtype(dtype) -> None:
    """Switch the global floating point precision (float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE[0] = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


class precision:
    """Context manager temporarily switching the default dtype."""

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        self._old = get_default_dtype()
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._old)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        dtype = dtype or get_default_dtype()
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum(self)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("output", "inputs", "backward", "op")

    def __init__(self, output, inputs, backward, op):
        self.output = output
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; ops run inside the ``with`` block are recorded
    on this tape. Tapes are thread-local, so independent tapes may run on
    separate threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()

    def __len__(self):
        return len(self.nodes)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable, op: str = "") -> None:
        output.requires_grad = True
        output._leaf = False
        self.nodes.append(_Node(output, tuple(inputs), backward, op))

    def backward(self, root: Tensor, retain_intermediate: bool = False) -> None:
        """Populate ``.grad`` of every tracked leaf with d(root)/d(leaf)."""
        if root.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        if not root.requires_grad:
            raise ValueError("root does not depend on any tracked tensor")
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            out = node.output
            g = out.grad
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise RuntimeError(f"{node.op}: adjoint shape {ig.shape} != input shape {inp.shape}")
                if inp.grad is None:
                    inp.grad = np.array(ig, dtype=inp.data.dtype, copy=True)
                else:
                    inp.grad += ig
            if not retain_intermediate:
                out.grad = None
        if not retain_intermediate and not root._leaf:
            root.grad = None

    def clear(self) -> None:
        self.nodes.clear()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(output: Tensor, inputs: Sequence[Tensor], backward: Callable, op: str = "") -> Tensor:
    """Attach ``output`` to the active tape if any input is tracked."""
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(output, inputs, backward, op)
    return output


def backward(tape: Tape, root: Tensor) -> None:
    tape.backward(root)
