"""Dense tensor type and the tape that records primitives for reverse mode.

A :class:`Tensor` is a thin wrapper over a numpy array.  Primitives in
:mod:`focalfuse.ops` compute their output eagerly and, when a :class:`Tape`
is active and some input requires a gradient, append a record holding the
vector-Jacobian product closure.  ``Tape.backward`` replays the records in
reverse execution order, which is a valid reverse topological order because
a record can only reference tensors produced before it.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError, TapeError

_ACTIVE: list["Tape"] = []

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if arr.ndim and min(arr.shape) < 1:
            raise DimensionError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return sum_all(self)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; primitives executed inside the block are
    recorded.  Outside any tape nothing is recorded, which is the inference
    mode.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        if self._consumed:
            raise TapeError("tape was already replayed; call reset() before reuse")
        self.records.append(_Record(out, inputs, vjp))
        self._produced.add(id(out))

    def reset(self) -> None:
        self.records.clear()
        self._produced.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf."""
        if self._consumed:
            raise TapeError("backward() called twice on the same tape without reset()")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise TapeError(
                        f"gradient shape {gi.shape} does not match input shape {inp.shape}"
                    )
                key = id(inp)
                if key in self._produced:
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        # Intermediates hold large activations; drop them once replayed.
        self.records.clear()


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_output(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable,
                op: str, check_finite: bool = True) -> Tensor:
    """Wrap a primitive's result, validate it, and record it if needed."""
    if check_finite and not np.isfinite(data).all():
        raise NumericError(f"{op}: produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(out, inputs, vjp)
    return out


def check_finite_input(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t is not None and not np.isfinite(t.data).all():
            raise NumericError(f"{op}: input contains non-finite values")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def add(a, b) -> Tensor:
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_output(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_output(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_output(out, (a, b), vjp, "mul")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype).reshape(())

    def vjp(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return make_output(out, (a,), vjp, "sum")


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of a (B, C, ...) tensor, keeping the axis."""
    if not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"channel slice {start}:{stop} out of range for {a.shape}")
    out = a.data[:, start:stop].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return make_output(out, (a,), vjp, "channel_slice", check_finite=False)
