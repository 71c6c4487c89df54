"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op that touches a tensor with ``requires_grad`` records a node: its
parent tensors and a closure mapping the upstream gradient to one gradient
per parent. Node ids come from one monotonically increasing counter, so the
id order *is* the append order of the recorded graph and ``backward`` simply
walks reachable nodes by descending id.

Broadcasting is deliberately narrow: the right operand of a binary op may be
a scalar, or a tensor of the same rank whose size-1 axes stretch to match the
left operand. The result always has the left operand's shape.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "reduce",
    "sum",
    "mean",
    "max",
    "softmax",
    "log_softmax",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "reshape",
    "transpose",
    "concat",
    "broadcast_to",
    "take",
    "l2_normalize",
]

_node_ids = itertools.count()
_state = threading.local()

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class no_grad:
    """Context manager that suspends graph recording on the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._id = next(_node_ids)
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        out._id = next(_node_ids)
        return out

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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad and id(p) not in seen)
        nodes.sort(key=lambda t: t._id, reverse=True)

        pending = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce("max", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a_shape: tuple, b_shape: tuple) -> None:
    if b_shape == () or b_shape == a_shape:
        return
    if len(b_shape) != len(a_shape) or any(
        bd != ad and bd != 1 for ad, bd in zip(a_shape, b_shape)
    ):
        raise ShapeError(f"cannot broadcast {b_shape} onto {a_shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    return g.sum(axis=axes, keepdims=True)


def elementwise(op_kind: str, a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    if op_kind == "add":
        out = ad + bd

        def bw(g):
            return g, _unbroadcast(g, bd.shape)

    elif op_kind == "sub":
        out = ad - bd

        def bw(g):
            return g, -_unbroadcast(g, bd.shape)

    elif op_kind == "mul":
        out = ad * bd

        def bw(g):
            return g * bd, _unbroadcast(g * ad, bd.shape)

    elif op_kind == "div":
        out = ad / bd

        def bw(g):
            return g / bd, _unbroadcast(-g * ad / (bd * bd), bd.shape)

    else:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return Tensor._from_op(out, (a, b), bw)


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def div(a, b) -> Tensor:
    return elementwise("div", a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape} do not agree")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes``; an empty axis tuple is the identity."""
    axes = _norm_axes(axes, x.ndim)
    if not axes:
        return Tensor._from_op(x.data.copy(), (x,), lambda g: (g,))
    if any(x.shape[a] == 0 for a in axes):
        raise ShapeError("cannot reduce over a zero-length axis")
    xd = x.data
    kept = tuple(1 if i in axes else d for i, d in enumerate(x.shape))

    if kind == "sum":
        out = xd.sum(axis=axes, keepdims=True)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept), xd.shape).copy(),)

    elif kind == "mean":
        count = int(np.prod([x.shape[a] for a in axes]))
        out = xd.mean(axis=axes, keepdims=True)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept) / count, xd.shape).copy(),)

    elif kind == "max":
        rest = tuple(i for i in range(x.ndim) if i not in axes)
        moved = np.transpose(xd, rest + axes)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(kept)

        def bw(g):
            onehot = np.zeros_like(flat)
            np.put_along_axis(onehot, idx[..., None], g.reshape(idx.shape + (1,)), axis=-1)
            inv = np.argsort(rest + axes)
            return (np.transpose(onehot.reshape(moved.shape), inv),)

    else:
        raise ValueError(f"unknown reduction {kind!r}")
    if not keepdims:
        out = out.reshape(tuple(d for i, d in enumerate(x.shape) if i not in axes))
    return Tensor._from_op(out, (x,), bw)


def sum(x: Tensor, axes=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce("sum", x, axes, keepdims)


def mean(x: Tensor, axes=None, keepdims=False) -> Tensor:
    return reduce("mean", x, axes, keepdims)


def max(x: Tensor, axes=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce("max", x, axes, keepdims)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(y, (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape algebra


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    ref = xs[0].shape
    axis = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat shapes {t.shape} and {ref} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Stretch size-1 axes of ``x`` to ``shape`` (ranks must agree)."""
    shape = tuple(shape)
    _check_broadcast(shape, x.shape)
    src = x.shape

    def bw(g):
        return (_unbroadcast(g, src),)

    return Tensor._from_op(np.broadcast_to(x.data, shape).copy(), (x,), bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select slices along ``axis``; repeated indices accumulate on backward."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise ShapeError("take needs at least one index")
    src = x.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, (slice(None),) * (axis % len(src)) + (idx,), g)
        return (full,)

    return Tensor._from_op(np.take(x.data, idx, axis=axis), (x,), bw)


def l2_normalize(x: Tensor, axis: int = 1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||_2, eps) along ``axis``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    active = norm > eps
    denom = np.where(active, norm, eps)
    y = xd / denom

    def bw(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - y * proj) / denom, g / eps),)

    return Tensor._from_op(y, (x,), bw)
