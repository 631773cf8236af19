"""Tensor type and the reverse-mode tape.

Every differentiable op appends one record ``(output, parents, backward_fn)``
to a thread-local tape. :func:`backward` walks the records in exact reverse
execution order, then clears the tape; a second ``backward`` over the same
graph raises :class:`TapeConsumedError`.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import NumericError, TapeConsumedError

_DEFAULT_DTYPE = [np.float32]


def set_default_dtype(dtype) -> None:
    _DEFAULT_DTYPE[0] = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE[0]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE[0] = old


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.records: list = []
        self.generation = 0

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records = []
        self.generation += 1


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True
        self.flop_counters: list = []


_state = _State()


def get_tape() -> Tape:
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class FlopCounter:
    """Accumulates matmul FLOPs (2*m*n*k per product) while active."""

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


@contextlib.contextmanager
def count_flops(counter: FlopCounter | None = None):
    counter = counter if counter is not None else FlopCounter()
    _state.flop_counters.append(counter)
    try:
        yield counter
    finally:
        _state.flop_counters.remove(counter)


def add_flops(n) -> None:
    if _state.flop_counters:
        for c in _state.flop_counters:
            c.add(n)


class Tensor:
    """Shaped numeric array that participates in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_gen", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else get_default_dtype()
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._gen = None  # tape generation for op outputs; None for leaves

    # -- introspection ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._gen is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def validate(self):
        """Raise NumericError if data (or grad) contains NaN/Inf."""
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in tensor {self.name or ''}".strip())
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise NumericError(f"non-finite gradient in tensor {self.name or ''}".strip())
        return self

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    def backward(self, grad=None):
        backward(self, grad)

    # -- operators (implemented in ops) --------------------------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __pow__(self, p):
        return _ops().power(self, p)

    def __getitem__(self, idx):
        return _ops().index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)


def _ops():
    from . import ops

    return ops


def make_output(data, parents, backward_fn) -> Tensor:
    """Wrap ``data`` as an op output, recording it on the tape when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._gen = None
    st = _state
    if st.grad_enabled:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                tape = st.tape
                out._gen = tape.generation
                tape.records.append((out, parents, backward_fn))
                return out
    out.requires_grad = False
    return out


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients flow through ops whose parameter operands are frozen
    (``requires_grad=False``); those operands simply receive nothing.
    """
    tape = _state.tape
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    if loss.is_leaf:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if loss._gen != tape.generation or not tape.records:
        raise TapeConsumedError("tape already consumed; re-run the forward pass before backward()")
    grads = {id(loss): seed}
    leaves = {}
    for out, parents, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgrads = fn(g)
        for p, pg in zip(parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if p._gen is None:
                leaves[key] = p
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    for key, leaf in leaves.items():
        g = grads[key]
        if g.dtype != leaf.data.dtype:
            g = g.astype(leaf.data.dtype)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape.clear()
