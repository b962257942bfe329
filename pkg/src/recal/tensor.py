"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the calling thread's
computation record (the *tape*). ``backward`` walks the tape in reverse
from the loss node, accumulates gradients into leaf tensors that have
``requires_grad`` set, and then clears the tape. Tensors produced before a
clear keep their values but no longer carry a graph.

Broadcasting is intentionally narrow: operands must have equal shapes, or
one of them is a scalar, or one of them matches the other's trailing shape
(a row vector repeated along the leading axis).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DomainError, ShapeError, StateError, ContractError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node(NamedTuple):
    tag: str
    parents: tuple
    backward: BackwardFn


class Tape:
    """Append-only record of operations for one thread."""

    def __init__(self):
        self.nodes: list[Node | None] = []
        self.generation = 0

    def __len__(self):
        return len(self.nodes)

    def append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def discard(self, start: int, stop: int) -> None:
        """Drop nodes in ``[start, stop)``; later nodes keep their indices."""
        for i in range(start, min(stop, len(self.nodes))):
            self.nodes[i] = None

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def live_count(self) -> int:
        return sum(n is not None for n in self.nodes)


_local = threading.local()


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run operations without recording them."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape", "_gen", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, copy=True, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: int | None = None
        self._tape: Tape | None = None
        self._gen = -1

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(data, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t._node = None
        t._tape = None
        t._gen = -1
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def node_id(self) -> int | None:
        """Index of this tensor's node in the active record, if still live."""
        return self._node if self._is_live() else None

    def _is_live(self) -> bool:
        if self._node is None:
            return False
        tape = self._tape
        return (
            tape is active_tape()
            and self._gen == tape.generation
            and self._node < len(tape.nodes)
            and tape.nodes[self._node] is not None
        )

    def tracked(self) -> bool:
        if self._node is None:
            return self.requires_grad
        return self._is_live()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __neg__(self):
        return neg(self)

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self, floor: float | None = None):
        return log(self, floor)

    def relu(self):
        return relu(self)

    def sum(self, axis: int | None = None):
        return reduce(self, "sum", axis)

    def mean(self, axis: int | None = None):
        return reduce(self, "mean", axis)

    def max(self, axis: int | None = None):
        return reduce(self, "max", axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, tag: str) -> Tensor:
    """Wrap ``data`` as the output of an operation over ``parents``.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per parent. Nothing is recorded when no parent is tracked or when
    recording is disabled.
    """
    out = Tensor._wrap(data)
    if grad_enabled() and any(p.tracked() for p in parents):
        tape = active_tape()
        out._node = tape.append(Node(tag, tuple(parents), backward_fn))
        out._tape = tape
        out._gen = tape.generation
        out.requires_grad = True
    return out


# -- broadcasting helpers ------------------------------------------------

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    if int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    if len(a) >= 1 and b == a[1:]:
        return a
    if len(b) >= 1 and a == b[1:]:
        return b
    raise ShapeError(f"incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    return g.sum(axis=0)


# -- unary ---------------------------------------------------------------

def neg(t: Tensor) -> Tensor:
    return record(-t.data, (t,), lambda g: (-g,), "neg")


def exp(t: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(t.data)
    if not np.all(np.isfinite(out)):
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(out))[0])
        raise DomainError(f"exp overflow at index {idx} (input {t.data[idx]!r})")
    return record(out, (t,), lambda g: (g * out,), "exp")


def log(t: Tensor, floor: float | None = None) -> Tensor:
    """Natural log. With ``floor`` set, computes ``log(max(x, floor))`` and
    uses ``1 / max(x, floor)`` as the local derivative."""
    x = t.data
    if floor is None:
        bad = x <= 0
        if np.any(bad):
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise DomainError(f"log of non-positive value {x[idx]!r} at index {idx}")
        safe = x
    else:
        safe = np.maximum(x, floor)
    return record(np.log(safe), (t,), lambda g: (g / safe,), "log")


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    return record(np.where(mask, t.data, 0.0), (t,), lambda g: (g * mask,), "relu")


def elementwise_unary(t: Tensor, kind: str) -> Tensor:
    ops = {"neg": neg, "exp": exp, "log": log, "relu": relu}
    if kind not in ops:
        raise ValueError(f"unknown unary op {kind!r}")
    return ops[kind](t)


# -- binary --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.tracked() else None,
            _unbroadcast(g * ad, bd.shape) if b.tracked() else None,
        )

    return record(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        idx = tuple(int(i) for i in np.argwhere(bd == 0)[0])
        raise DomainError(f"division by zero at divisor index {idx}")
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.tracked() else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.tracked() else None,
        )

    return record(out, (a, b), bw, "div")


def elementwise_binary(a, b, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown binary op {kind!r}")
    return ops[kind](a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            g @ bd.T if a.tracked() else None,
            ad.T @ g if b.tracked() else None,
        )

    return record(ad @ bd, (a, b), bw, "matmul")


# -- reductions and reshaping -------------------------------------------

def reduce(t: Tensor, kind: str, axis: int | None = None) -> Tensor:
    x = t.data
    if axis is not None:
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
        axis = axis % x.ndim
    shape = x.shape

    if kind == "sum":
        out = x.sum(axis=axis)

        def bw(g):
            g = g if axis is None else np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
    elif kind == "mean":
        n = x.size if axis is None else shape[axis]
        out = x.mean(axis=axis)

        def bw(g):
            g = g if axis is None else np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, shape).copy(),)
    elif kind == "max":
        if axis is None:
            first = np.argmax(x)
            out = x.reshape(-1)[first]

            def bw(g):
                dx = np.zeros(x.size)
                dx[first] = np.asarray(g).reshape(-1)[0]
                return (dx.reshape(shape),)
        else:
            first = np.expand_dims(np.argmax(x, axis=axis), axis)
            out = np.take_along_axis(x, first, axis=axis).squeeze(axis)

            def bw(g):
                dx = np.zeros(shape)
                np.put_along_axis(dx, first, np.expand_dims(g, axis), axis=axis)
                return (dx,)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return record(np.asarray(out, dtype=np.float64), (t,), bw, kind)


def tsum(t: Tensor, axis: int | None = None) -> Tensor:
    return reduce(t, "sum", axis)


def tmean(t: Tensor, axis: int | None = None) -> Tensor:
    return reduce(t, "mean", axis)


def tmax(t: Tensor, axis: int | None = None) -> Tensor:
    return reduce(t, "max", axis)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    src = t.shape
    try:
        out = t.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return record(out, (t,), lambda g: (g.reshape(src),), "reshape")


def transpose(t: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(t.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(t.data.transpose(axes), (t,), lambda g: (g.transpose(inv),), "transpose")


# -- backward ------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate additively; the record is cleared afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise StateError("loss is not attached to any computation record")
    if not loss._is_live():
        raise StateError("computation record for this loss has already been cleared")

    tape = loss._tape
    nodes = tape.nodes
    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    gen = tape.generation

    for i in range(loss._node, -1, -1):
        g = grads.pop(i, None)
        node = nodes[i]
        if g is None or node is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None:
                continue
            if parent._node is not None:
                if parent._tape is tape and parent._gen == gen and nodes[parent._node] is not None:
                    j = parent._node
                    grads[j] = grads[j] + pg if j in grads else pg
            elif parent.requires_grad:
                key = id(parent)
                if key in leaves:
                    leaves[key] = (parent, leaves[key][1] + pg)
                else:
                    leaves[key] = (parent, pg)

    for t, g in leaves.values():
        g = np.asarray(g, dtype=np.float64).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.clear()
