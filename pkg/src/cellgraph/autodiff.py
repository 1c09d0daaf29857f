"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a :class:`TapeEntry` on its output when
at least one input requires a gradient.  :func:`backward` collects the entries
reachable from a scalar loss into a :class:`Tape` (topologically ordered),
walks it once in reverse, and releases the saved intermediates so a second
backward through the same recording raises :class:`TapeError`.

Broadcasting is deliberately absent: binary operations require equal shapes,
with a 0-d tensor or a Python number as the only exception.  Use
:func:`broadcast_to` when a row/column expansion is intended.
"""
from __future__ import annotations

import builtins
import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "TapeEntry", "ShapeError", "DomainError", "TapeError",
    "tensor", "add", "sub", "mul", "neg", "relu", "sigmoid", "tanh", "exp",
    "log", "elementwise", "matmul", "reduce", "sum", "mean", "max", "concat",
    "split", "reshape", "transpose", "broadcast_to", "take_rows",
    "take_along_rows", "segment_max", "gather_segment_max", "softmax_cross_entropy", "backward",
    "record_tape", "no_grad", "debug_mode", "OptimizerState", "SGD", "Adam",
    "optimizer_step", "GradcheckReport", "gradcheck",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ArithmeticError):
    """A value falls outside an operation's numeric domain."""


class TapeError(RuntimeError):
    """Invalid use of the recording (non-scalar root, replayed backward)."""


_state = {"grad": True, "debug": False}


@contextlib.contextmanager
def no_grad():
    """Suspend recording; results carry no tape entries."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Raise :class:`DomainError` as soon as any op produces NaN or Inf."""
    prev = _state["debug"]
    _state["debug"] = enabled
    try:
        yield
    finally:
        _state["debug"] = prev


@dataclass(eq=False)
class TapeEntry:
    op: str
    inputs: tuple
    output: "Tensor"
    vjp: Callable | None
    consumed: bool = False


@dataclass
class Tape:
    """Recorded operations leading to one root, inputs before consumers."""

    entries: list[TapeEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_entry", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._entry: TapeEntry | None = None
        self.name = name

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
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self):
        return backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is only supported by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(out_data)):
        raise DomainError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._entry = None
    out.requires_grad = _state["grad"] and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out._entry = TapeEntry(op, tuple(inputs), out, vjp)
    return out


# ---------------------------------------------------------------- elementwise

def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _record("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    if not np.all(np.isfinite(e)):
        raise DomainError("exp overflow: argument too large for float64")
    return _record("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    x = a.data
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "sigmoid": sigmoid,
                "tanh": tanh, "exp": exp, "log": log, "neg": neg}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise operation by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: {src} -> {tuple(shape)}: {exc}") from None
    return _record("reshape", out.copy(), (a,), lambda g: (g.reshape(src),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast (numpy rules); backward sums over expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {src} is not broadcastable to {shape}") from None

    def vjp(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _record("broadcast_to", out, (a,), vjp)


# ---------------------------------------------------------------- reductions

def _check_axis(t: Tensor, axis):
    if axis is not None and not (-t.ndim <= axis < t.ndim):
        raise ShapeError(f"axis {axis} out of range for shape {t.shape}")


def sum(t: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    t = _as_tensor(t)
    _check_axis(t, axis)
    shape = t.shape

    def vjp(g):
        g = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(t.data.sum(axis=axis)), (t,), vjp)


def mean(t: Tensor, axis: int | None = None) -> Tensor:
    t = _as_tensor(t)
    _check_axis(t, axis)
    n = t.size if axis is None else t.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    shape = t.shape

    def vjp(g):
        g = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record("mean", np.asarray(t.data.mean(axis=axis)), (t,), vjp)


def max(t: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    """Maximum; the gradient goes to the first (lowest-index) maximal entry."""
    t = _as_tensor(t)
    _check_axis(t, axis)
    if t.size == 0 or (axis is not None and t.shape[axis] == 0):
        raise ShapeError("max over an empty axis")
    shape = t.shape
    if axis is None:
        idx = int(np.argmax(t.data))

        def vjp(g):
            out = np.zeros(t.size)
            out[idx] = g
            return (out.reshape(shape),)

        return _record("max", np.asarray(t.data.reshape(-1)[idx]), (t,), vjp)

    idx = np.expand_dims(np.argmax(t.data, axis=axis), axis)

    def vjp(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis)
        return (out,)

    return _record("max", np.take_along_axis(t.data, idx, axis).squeeze(axis), (t,), vjp)


_REDUCE = {"sum": sum, "mean": mean, "max": max}


def reduce(op: str, t: Tensor, axis: int | None = None) -> Tensor:
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    return fn(t, axis)


# ---------------------------------------------------------------- structure

def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(
                i != (axis % len(ref)) and p.shape[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {p.shape} disagree")
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _record("concat", np.concatenate([p.data for p in parts], axis=axis), parts,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def _slice(t: Tensor, start: int, stop: int, axis: int) -> Tensor:
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = t.shape

    def vjp(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _record("slice", t.data[index].copy(), (t,), vjp)


def split(t: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if builtins.sum(sizes) != t.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {t.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        out.append(_slice(t, start, start + n, axis))
        start += n
    return out


def take_rows(t: Tensor, index) -> Tensor:
    """Gather rows ``t[index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)
    shape = t.shape

    def vjp(g):
        return (_scatter_rows(index, g, shape),)

    return _record("take_rows", t.data[index], (t,), vjp)


def take_along_rows(t: Tensor, index) -> Tensor:
    """``out[i, j] = t[i, index[i, j]]`` for a matrix ``t``."""
    index = np.asarray(index, dtype=np.intp)
    if t.ndim != 2 or index.ndim != 2 or index.shape[0] != t.shape[0]:
        raise ShapeError(f"take_along_rows: index {index.shape} vs tensor {t.shape}")
    shape = t.shape
    rows = np.repeat(np.arange(shape[0]), index.shape[1])

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, index.reshape(-1)), g.reshape(-1))
        return (out,)

    return _record("take_along_rows", np.take_along_axis(t.data, index, 1), (t,), vjp)


def _scatter_rows(index: np.ndarray, g: np.ndarray, shape) -> np.ndarray:
    """``out[index[i]] += g[i]``; bincount is much faster than ``np.add.at``."""
    if len(shape) == 1:
        return np.bincount(index, weights=g, minlength=shape[0]).astype(np.float64)
    width = int(np.prod(shape[1:]))
    flat = (index[:, None] * width + np.arange(width)).reshape(-1)
    out = np.bincount(flat, weights=g.reshape(-1), minlength=shape[0] * width)
    return out.reshape(shape)


def segment_max(values: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Row-wise max of ``values`` grouped by ``segment_ids``.

    Empty segments yield zero rows.  Within a segment, ties send the gradient
    to the row that appears first in ``values``.
    """
    seg = np.asarray(segment_ids, dtype=np.intp)
    if values.ndim != 2 or seg.shape != (values.shape[0],):
        raise ShapeError(f"segment_max: values {values.shape} vs ids {seg.shape}")
    n_rows = values.shape[0]
    order = np.argsort(seg, kind="stable")
    return _sorted_segment_max(values, order, seg[order], num_segments, n_rows, "segment_max")


def gather_segment_max(values: Tensor, src, dst, num_segments: int) -> Tensor:
    """``out[v] = max_{e: dst[e] = v} values[src[e]]``, without materializing the gather twice.

    Same as ``segment_max(take_rows(values, src), dst, num_segments)``,
    including the tie rule (first edge in the given order wins).
    """
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    if values.ndim != 2 or src.shape != dst.shape or src.ndim != 1:
        raise ShapeError(f"gather_segment_max: values {values.shape}, src {src.shape}, dst {dst.shape}")
    order = np.argsort(dst, kind="stable")
    return _sorted_segment_max(values, src[order], dst[order], num_segments, values.shape[0],
                               "gather_segment_max")


def _sorted_segment_max(values: Tensor, rows: np.ndarray, sseg: np.ndarray, num_segments: int,
                        n_in: int, op: str) -> Tensor:
    # rows[i] is the input row feeding the i-th entry; sseg is sorted.  Segments are
    # laid out in a padded (segments, max_len) table whose padding points at a -inf row,
    # so reductions run over the leading slot axis of a contiguous array.
    width = values.shape[1]
    out = np.zeros((num_segments, width))
    if len(rows) == 0:
        return _record(op, out, (values,), lambda g: (np.zeros((n_in, width)),))
    starts = np.flatnonzero(np.r_[True, sseg[1:] != sseg[:-1]])
    counts = np.diff(np.r_[starts, len(rows)])
    present = sseg[starts]
    slot = np.arange(len(rows)) - np.repeat(starts, counts)
    table = np.full((len(starts), int(counts.max())), n_in, dtype=np.intp)
    table[np.repeat(np.arange(len(starts)), counts), slot] = rows
    ext = np.vstack([values.data, np.full((1, width), -np.inf)])
    vals = ext[table.T]  # (max_len, segments, width)
    best = vals.max(axis=0)
    out[present] = best

    def vjp(g):
        # earliest maximal slot = number of slots before the first hit
        if width == 1:
            arg = (vals == best).argmax(axis=0)
        else:
            arg = np.zeros(best.shape, dtype=np.intp)
            found = np.zeros(best.shape, dtype=bool)
            hit = np.empty(best.shape, dtype=bool)
            for j in range(vals.shape[0]):
                np.equal(vals[j], best, out=hit)
                found |= hit
                arg += ~found
        winner = np.take_along_axis(table, arg, axis=1)  # (segments, width)
        flat = (winner * width + np.arange(width)).reshape(-1)
        grad = np.bincount(flat, weights=g[present].reshape(-1), minlength=n_in * width)
        return (grad.reshape(n_in, width),)

    return _record(op, out, (values,), vjp)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    target = np.asarray(target, dtype=np.intp).reshape(-1)
    if logits.ndim != 2 or target.shape[0] != logits.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, targets {target.shape}")
    n, c = logits.shape
    if np.any(target < 0) or np.any(target >= c):
        raise IndexError(f"target class out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, target])

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, target] -= 1.0
        return (p * (g / n),)

    return _record("softmax_cross_entropy", np.asarray(loss), (logits,), vjp)


# ---------------------------------------------------------------- backward

def record_tape(root: Tensor) -> Tape:
    """Entries reachable from ``root``, ordered so inputs precede consumers."""
    if root._entry is None:
        return Tape([])
    order: list[TapeEntry] = []
    seen: set[int] = set()
    stack = [(root._entry, False)]
    while stack:
        entry, done = stack.pop()
        if done:
            order.append(entry)
            continue
        if id(entry) in seen:
            continue
        seen.add(id(entry))
        stack.append((entry, True))
        for t in reversed(entry.inputs):
            if t._entry is not None and id(t._entry) not in seen:
                stack.append((t._entry, False))
    return Tape(order)


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None):
    """Propagate d(loss) to every leaf that requires a gradient.

    Leaf ``.grad`` fields accumulate.  Returns a dict leaf -> gradient, or,
    when ``inputs`` is given, a list of gradients aligned with it (zeros for
    tensors the loss does not depend on).
    """
    if loss.size != 1 or loss.ndim != 0:
        raise TapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("root is not on the tape (no input requires a gradient)")
    leaves: dict[int, Tensor] = {}
    leaf_grads: dict[int, np.ndarray] = {}
    if loss._entry is None:
        leaves[id(loss)] = loss
        leaf_grads[id(loss)] = np.ones(())
    else:
        if loss._entry.consumed:
            raise TapeError("backward through an already-consumed recording; re-run the forward pass")
        tape = record_tape(loss)
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for entry in reversed(tape.entries):
            g = grads.pop(id(entry.output), None)
            vjp = entry.vjp
            entry.vjp = None
            entry.consumed = True
            if g is None:
                continue
            for t, gi in zip(entry.inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                bucket = grads if t._entry is not None else leaf_grads
                if t._entry is None:
                    leaves[key] = t
                bucket[key] = bucket[key] + gi if key in bucket else np.array(gi, dtype=np.float64)
    for key, t in leaves.items():
        g = leaf_grads[key].reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    if inputs is None:
        return {t: leaf_grads[k].reshape(t.shape) for k, t in leaves.items()}
    return [leaf_grads[id(t)].reshape(t.shape) if id(t) in leaf_grads else np.zeros(t.shape)
            for t in inputs]


# ---------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
                   state: OptimizerState) -> list[np.ndarray]:
    """Return updated parameter arrays; ``state`` is advanced in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    grads = [np.zeros_like(p) if g is None else np.asarray(g) for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {p.shape} vs gradient {g.shape}")
    state.step += 1
    if state.kind == "sgd":
        return [p - state.lr * g for p, g in zip(params, grads)]
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for m, p in zip(state.m, params):
        if m.shape != p.shape:
            raise ShapeError(f"adam moment {m.shape} vs parameter {p.shape}")
    b1, b2, t = state.beta1, state.beta2, state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1 ** t)
        v_hat = state.v[i] / (1 - b2 ** t)
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


class _Optimizer:
    def __init__(self, params: Sequence[Tensor], state: OptimizerState):
        self.params = list(params)
        self.state = state

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        new = optimizer_step([p.data for p in self.params], [p.grad for p in self.params],
                             self.state)
        for p, d in zip(self.params, new):
            p.data = d


class SGD(_Optimizer):
    def __init__(self, params, lr: float = 1e-2):
        super().__init__(params, OptimizerState(kind="sgd", lr=lr))


class Adam(_Optimizer):
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(params, OptimizerState("adam", lr, beta1, beta2, eps))


# ---------------------------------------------------------------- gradcheck

@dataclass
class GradcheckReport:
    max_rel_error: float
    passed: bool
    worst: tuple[int, int] | None  # (input number, flat coordinate)
    n_checked: int

    def __bool__(self) -> bool:
        return self.passed


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], tol: float = 1e-5,
              h: float = 1e-6, floor: float = 1e-3, seed: int = 0) -> GradcheckReport:
    """Compare backward() with central differences for every input coordinate.

    Non-scalar outputs are contracted with a fixed random weight tensor.  The
    relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    near-zero gradients from amplifying float64 rounding of the differences.
    """
    weights = None

    def scalar(*args):
        nonlocal weights
        out = fn(*args)
        if out.ndim == 0:
            return out
        if weights is None:
            weights = np.random.default_rng(seed).standard_normal(out.shape)
        return sum(mul(out, Tensor(weights)))

    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    analytic = backward(scalar(*inputs), inputs)
    worst, worst_at, count = 0.0, None, 0
    with no_grad():
        for i, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = scalar(*inputs).item()
                flat[j] = orig - h
                fm = scalar(*inputs).item()
                flat[j] = orig
                num = (fp - fm) / (2 * h)
                a = analytic[i].reshape(-1)[j]
                err = abs(a - num) / builtins.max(abs(a), abs(num), floor)
                count += 1
                if err > worst or worst_at is None:
                    worst, worst_at = err, (i, j)
    if not math.isfinite(worst):
        worst = math.inf
    return GradcheckReport(float(worst), bool(worst < tol), worst_at, count)

