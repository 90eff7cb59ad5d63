"""Dense float64 tensors and tape-based reverse-mode differentiation.

Just enough array machinery for a small normalization-layer classifier:
2-D matrix products, axis reductions, stable softmax / log-softmax, and
explicit (never implicit) broadcasting. Differentiation is recorded on an
explicit :class:`Tape`; gradients accumulate additively across fan-out and
are returned per trainable slot by :func:`backward`.
"""

from __future__ import annotations

from typing import Iterable, Sequence, Union

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class TapeError(RuntimeError):
    """Misuse of the recording/backward machinery."""


class Tensor:
    """Immutable dense array of float64 values.

    All user-facing constructions reject NaN/Inf. The backing numpy array
    is marked read-only, so tensors are safe to share across threads.
    """

    __slots__ = ("_data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite (no NaN/Inf)")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path for freshly computed float64 results.
        t = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t._data = arr
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        return float(self._data)

    def tolist(self):
        return self._data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Var:
    """A value recorded on a tape; participates in the same ops as Tensor."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray) -> None:
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def tensor(self) -> Tensor:
        return Tensor._wrap(self.value.copy())

    def __repr__(self) -> str:
        return f"Var(index={self.index}, shape={self.shape})"


class _Record:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents, vjp) -> None:
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations.

    Single-writer: a tape must not be shared across threads while
    recording. Backward traverses in exact reverse of record order.
    """

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._trainable: list[Var] = []

    def variable(self, value: Union[Tensor, np.ndarray], trainable: bool = False) -> Var:
        """Enter a leaf value on the tape; trainable leaves are gradient slots."""
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        var = self._emit(arr, (), None)
        if trainable:
            self._trainable.append(var)
        return var

    @property
    def trainable(self) -> tuple[Var, ...]:
        return tuple(self._trainable)

    def _emit(self, value: np.ndarray, parents, vjp) -> Var:
        var = Var(self, len(self._records), value)
        self._records.append(_Record(tuple(p.index for p in parents), vjp))
        return var


ArrayLike = Union[Tensor, Var, np.ndarray, Sequence, float, int]


def _value(x: ArrayLike) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _tape_of(*xs: ArrayLike) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and tape is not x.tape:
                raise TapeError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _apply(tape: Tape | None, out: np.ndarray, parents, vjp):
    if tape is None:
        return Tensor._wrap(out)
    recorded = [p for p in parents if isinstance(p, Var)]
    # Constants occupy no slot; the vjp still returns one grad per Var parent.
    return tape._emit(out, recorded, vjp)


def _check_axes(shape: tuple[int, ...], axes: Iterable[int]) -> tuple[int, ...]:
    axes = tuple(axes)
    if len(axes) == 0:
        raise ValueError("reduction needs at least one axis")
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate reduction axes {axes}")
    for a in axes:
        if not (0 <= a < len(shape)):
            raise ValueError(f"axis {a} out of range for shape {shape}")
    return axes


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: ArrayLike, b: ArrayLike):
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add: shapes {av.shape} vs {bv.shape}")
    tape = _tape_of(a, b)

    def vjp(g):
        out = []
        if isinstance(a, Var):
            out.append(g)
        if isinstance(b, Var):
            out.append(g)
        return out

    return _apply(tape, av + bv, (a, b), vjp)


def sub(a: ArrayLike, b: ArrayLike):
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise ShapeError(f"sub: shapes {av.shape} vs {bv.shape}")
    tape = _tape_of(a, b)

    def vjp(g):
        out = []
        if isinstance(a, Var):
            out.append(g)
        if isinstance(b, Var):
            out.append(-g)
        return out

    return _apply(tape, av - bv, (a, b), vjp)


def mul(a: ArrayLike, b: ArrayLike):
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise ShapeError(f"mul: shapes {av.shape} vs {bv.shape}")
    tape = _tape_of(a, b)

    def vjp(g):
        out = []
        if isinstance(a, Var):
            out.append(g * bv)
        if isinstance(b, Var):
            out.append(g * av)
        return out

    return _apply(tape, av * bv, (a, b), vjp)


def neg(a: ArrayLike):
    av = _value(a)
    return _apply(_tape_of(a), -av, (a,), lambda g: [-g])


def add_scalar(a: ArrayLike, c: float):
    av = _value(a)
    return _apply(_tape_of(a), av + float(c), (a,), lambda g: [g])


def mul_scalar(a: ArrayLike, c: float):
    av = _value(a)
    c = float(c)
    return _apply(_tape_of(a), av * c, (a,), lambda g: [g * c])


def relu(a: ArrayLike):
    av = _value(a)
    mask = av > 0.0
    return _apply(_tape_of(a), np.where(mask, av, 0.0), (a,), lambda g: [g * mask])


def rsqrt(a: ArrayLike):
    """Elementwise 1/sqrt(x); caller guarantees strictly positive input."""
    av = _value(a)
    out = 1.0 / np.sqrt(av)
    return _apply(_tape_of(a), out, (a,), lambda g: [g * (-0.5) * out / av])


def transpose(a: ArrayLike, perm: Sequence[int]):
    av = _value(a)
    perm = tuple(perm)
    if sorted(perm) != list(range(av.ndim)):
        raise ShapeError(f"transpose: invalid permutation {perm} for ndim {av.ndim}")
    inv = np.argsort(perm)
    return _apply(_tape_of(a), np.transpose(av, perm), (a,), lambda g: [np.transpose(g, inv)])


def reshape(a: ArrayLike, shape: Sequence[int]):
    av = _value(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != av.size:
        raise ShapeError(f"reshape: cannot view {av.shape} as {shape}")
    old = av.shape
    return _apply(_tape_of(a), av.reshape(shape), (a,), lambda g: [g.reshape(old)])


def expand(v: ArrayLike, shape: Sequence[int], axes: Sequence[int]):
    """Place v's dimensions at `axes` of `shape` and tile across the rest.

    The only broadcasting permitted anywhere in this module: explicit, with
    the target shape spelled out (e.g. a per-channel vector expanded over a
    batch-by-channel-by-length feature map).
    """
    vv = _value(v)
    shape = tuple(int(s) for s in shape)
    axes = tuple(axes)
    if len(axes) != vv.ndim:
        raise ShapeError(f"expand: {len(axes)} axes for ndim {vv.ndim}")
    if tuple(vv.shape) != tuple(shape[a] for a in axes):
        raise ShapeError(f"expand: value shape {vv.shape} does not fit {shape} at axes {axes}")
    if list(axes) != sorted(axes):
        raise ShapeError("expand: axes must be increasing")
    view = [1] * len(shape)
    for a, extent in zip(axes, vv.shape):
        view[a] = extent
    other = tuple(i for i in range(len(shape)) if i not in axes)
    out = np.broadcast_to(vv.reshape(view), shape).copy()

    def vjp(g):
        return [g.sum(axis=other) if other else g.copy()]

    return _apply(_tape_of(v), out, (v,), vjp)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a: ArrayLike, axes: Sequence[int]):
    av = _value(a)
    axes = _check_axes(av.shape, axes)
    shape = av.shape

    def vjp(g):
        view = [1 if i in axes else shape[i] for i in range(len(shape))]
        return [np.broadcast_to(g.reshape(view), shape).copy()]

    return _apply(_tape_of(a), av.sum(axis=axes), (a,), vjp)


def reduce_mean(a: ArrayLike, axes: Sequence[int]):
    av = _value(a)
    axes = _check_axes(av.shape, axes)
    shape = av.shape
    count = 1
    for ax in axes:
        count *= shape[ax]

    def vjp(g):
        view = [1 if i in axes else shape[i] for i in range(len(shape))]
        return [np.broadcast_to(g.reshape(view) / count, shape).copy()]

    return _apply(_tape_of(a), av.mean(axis=axes), (a,), vjp)


def reduce_var(a: ArrayLike, axes: Sequence[int]):
    """Population variance (divide by count) about the mean over `axes`."""
    av = _value(a)
    axes = _check_axes(av.shape, axes)
    shape = av.shape
    count = 1
    for ax in axes:
        count *= shape[ax]
    mean = av.mean(axis=axes, keepdims=True)
    centered = av - mean
    out = np.mean(centered * centered, axis=axes)

    def vjp(g):
        view = [1 if i in axes else shape[i] for i in range(len(shape))]
        # d var / d x = 2 (x - mean) / count; the term through the mean cancels.
        return [np.broadcast_to(g.reshape(view), shape) * (2.0 / count) * centered]

    return _apply(_tape_of(a), out, (a,), vjp)


def reduce_mean_var(a: ArrayLike, axes: Sequence[int]):
    """Mean and population variance over `axes`, axes removed from the shape."""
    return reduce_mean(a, axes), reduce_var(a, axes)


# ---------------------------------------------------------------------------
# matrix product and row-wise classification ops


def matmul(a: ArrayLike, b: ArrayLike):
    av, bv = _value(a), _value(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner extents {av.shape} x {bv.shape} do not agree")
    tape = _tape_of(a, b)

    def vjp(g):
        out = []
        if isinstance(a, Var):
            out.append(g @ bv.T)
        if isinstance(b, Var):
            out.append(av.T @ g)
        return out

    return _apply(tape, av @ bv, (a, b), vjp)


def softmax(a: ArrayLike):
    """Row-normalized exponentials over the last axis, max-subtracted."""
    av = _value(a)
    if av.ndim < 1 or av.shape[-1] < 1:
        raise ShapeError(f"softmax: need at least one class, got shape {av.shape}")
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return [p * (g - inner)]

    return _apply(_tape_of(a), p, (a,), vjp)


def log_softmax(a: ArrayLike):
    av = _value(a)
    if av.ndim < 1 or av.shape[-1] < 1:
        raise ShapeError(f"log_softmax: need at least one class, got shape {av.shape}")
    shifted = av - av.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return [g - p * g.sum(axis=-1, keepdims=True)]

    return _apply(_tape_of(a), out, (a,), vjp)


def take_per_row(a: ArrayLike, indices: Sequence[int]):
    """Pick one column per row of a 2-D array: out[i] = a[i, indices[i]]."""
    av = _value(a)
    if av.ndim != 2:
        raise ShapeError(f"take_per_row: expected 2-D input, got {av.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (av.shape[0],):
        raise ShapeError(f"take_per_row: {idx.shape[0] if idx.ndim else 0} indices for {av.shape[0]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= av.shape[1]):
        raise ValueError("take_per_row: index out of range")
    rows = np.arange(av.shape[0])
    shape = av.shape

    def vjp(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return [full]

    return _apply(_tape_of(a), av[rows, idx], (a,), vjp)


# ---------------------------------------------------------------------------
# backward


def backward(tape: Tape, loss: Var) -> dict[Var, Tensor]:
    """Gradients of a recorded scalar loss for every trainable slot.

    Trainable slots the loss does not depend on receive zero gradients;
    non-trainable slots receive none.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise TapeError("loss is not recorded on this tape")
    if loss.value.shape != ():
        raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")

    grads: list[np.ndarray | None] = [None] * len(tape._records)
    grads[loss.index] = np.ones(())
    for i in range(loss.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        rec = tape._records[i]
        if rec.vjp is None:
            continue
        for parent_index, pg in zip(rec.parents, rec.vjp(g)):
            if grads[parent_index] is None:
                grads[parent_index] = np.array(pg, dtype=np.float64)
            else:
                grads[parent_index] = grads[parent_index] + pg
    out: dict[Var, Tensor] = {}
    for var in tape._trainable:
        g = grads[var.index]
        if g is None:
            g = np.zeros_like(var.value)
        out[var] = Tensor._wrap(np.asarray(g, dtype=np.float64))
    return out
