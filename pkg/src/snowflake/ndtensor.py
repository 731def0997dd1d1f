"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a closure mapping the output gradient to one gradient per
input.  ``Tensor.backward`` walks the recorded graph in reverse topological
order and accumulates into ``.grad`` of every leaf with ``requires_grad``.

Broadcasting is deliberately narrow.  Two operands combine when

* their shapes are equal,
* they have the same rank and every mismatched axis has size 1 on one side
  (e.g. a ``1 x C`` row against an ``N x C`` matrix), or
* one of them is a 0-d scalar.

Anything else raises :class:`ShapeError`; use :func:`broadcast_to` or
:func:`repeat` to expand explicitly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "tanh",
    "relu",
    "exp",
    "elementwise",
    "softmax",
    "softmax_rows",
    "reduce",
    "sum",
    "mean",
    "max",
    "gather",
    "concat",
    "reshape",
    "transpose",
    "repeat",
    "broadcast_to",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Wrap an op result; ``backward(g)`` must return one gradient (or None) per parent."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ---------------------------------------------------

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators ----------------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# -- broadcasting -----------------------------------------------------------


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) != len(b):
        raise ShapeError(f"cannot broadcast shapes {a} and {b}: rank mismatch")
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# -- binary elementwise -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad * bd, (a, b), backward)


# -- unary elementwise ------------------------------------------------------------


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


_BELOW_ONE = np.nextafter(1.0, 0.0)


def tanh(a: Tensor) -> Tensor:
    """Hyperbolic tangent, kept strictly inside (-1, 1) even where float64 would round to 1."""
    a = _as_tensor(a)
    y = np.clip(np.tanh(a.data), -_BELOW_ONE, _BELOW_ONE)
    return Tensor.from_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.maximum(a.data, 0.0)
    return Tensor.from_op(y, (a,), lambda g: (g * (y > 0),))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return Tensor.from_op(y, (a,), lambda g: (g * y,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "neg": neg,
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name: one of add, sub, mul, tanh, relu, exp, neg."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), backward)


# -- softmax ----------------------------------------------------------------------


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Normalized exponential along ``axis``, stabilized by max subtraction."""
    t = _as_tensor(t)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(s, (t,), backward)


def softmax_rows(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-d tensor, got {t.shape}")
    return softmax(t, axis=1)


# -- reductions ---------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    t = _as_tensor(t)
    axis = _norm_axis(axis, t.ndim)
    shape = t.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(np.asarray(t.data.sum(axis=axis, keepdims=keepdims)), (t,), backward)


def mean(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    axis = _norm_axis(axis, t.ndim)
    n = t.size if axis is None else t.shape[axis]
    return mul(sum(t, axis=axis, keepdims=keepdims), 1.0 / n)


def max(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max reduction; the gradient goes to the lowest-index maximizer."""
    t = _as_tensor(t)
    axis = _norm_axis(axis, t.ndim)
    shape = t.shape
    if axis is None:
        flat = int(np.argmax(t.data))
        out = np.asarray(t.data.reshape(-1)[flat])
        if keepdims:
            out = out.reshape((1,) * t.ndim)

        def backward(g):
            full = np.zeros(t.size)
            full[flat] = np.asarray(g).reshape(())
            return (full.reshape(shape),)

        return Tensor.from_op(out, (t,), backward)

    idx = np.expand_dims(np.argmax(t.data, axis=axis), axis)
    out = np.take_along_axis(t.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return Tensor.from_op(out, (t,), backward)


_REDUCE = {"sum": sum, "mean": mean, "max": max}


def reduce(op: str, t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    return fn(t, axis=axis, keepdims=keepdims)


# -- indexing and layout --------------------------------------------------------


def gather(t: Tensor, indices, axis: int = 0) -> Tensor:
    """Select slices along ``axis``; ``indices`` may have any shape.

    Output shape is ``t.shape[:axis] + indices.shape + t.shape[axis+1:]``.
    """
    t = _as_tensor(t)
    axis = _norm_axis(axis, t.ndim)
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise TypeError(f"gather indices must be integers, got {idx.dtype}")
    n = t.shape[axis]
    if idx.size:
        lo, hi = int(idx.min()), int(idx.max())
        if lo < 0:
            raise IndexError(f"gather index {lo} out of range for axis of size {n}")
        if hi >= n:
            raise IndexError(f"gather index {hi} out of range for axis of size {n}")
    out = np.take(t.data, idx, axis=axis)
    shape = t.shape

    def backward(g):
        if axis == 0:
            return (_scatter_rows(idx.reshape(-1), g.reshape((idx.size,) + shape[1:]), shape),)
        moved = np.zeros((shape[axis],) + shape[:axis] + shape[axis + 1 :])
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (np.moveaxis(moved, 0, axis),)

    return Tensor.from_op(out, (t,), backward)


def _scatter_rows(flat_idx: np.ndarray, rows: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """``out[flat_idx[i]] += rows[i]`` via a sparse product (much faster than ufunc.at)."""
    n = shape[0]
    if flat_idx.size == 0:
        return np.zeros(shape)
    sel = sparse.csr_matrix(
        (np.ones(flat_idx.size), (flat_idx, np.arange(flat_idx.size))), shape=(n, flat_idx.size)
    )
    out = sel @ rows.reshape(flat_idx.size, -1)
    return np.asarray(out).reshape(shape)


def concat(ts: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    ndim = ts[0].ndim
    axis = _norm_axis(axis, ndim)
    for t in ts[1:]:
        if t.ndim != ndim or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ts[0].shape)) if i != axis
        ):
            raise ShapeError(
                f"concat shapes disagree off axis {axis}: {[x.shape for x in ts]}"
            )
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def reshape(t: Tensor, shape) -> Tensor:
    t = _as_tensor(t)
    old = t.shape
    try:
        out = t.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return Tensor.from_op(out, (t,), lambda g: (g.reshape(old),))


def transpose(t: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    t = _as_tensor(t)
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(axes)
    if sorted(a % t.ndim for a in axes) != list(range(t.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {t.ndim}")
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inv),))


def repeat(t: Tensor, r: int, axis: int = 0) -> Tensor:
    """Repeat each slice along ``axis`` ``r`` times consecutively (rows j*r .. j*r+r-1)."""
    t = _as_tensor(t)
    axis = _norm_axis(axis, t.ndim)
    if r < 1:
        raise ContractError(f"repeat factor must be >= 1, got {r}")
    shape = t.shape

    def backward(g):
        split = shape[:axis] + (shape[axis], r) + shape[axis + 1 :]
        return (g.reshape(split).sum(axis=axis + 1),)

    return Tensor.from_op(np.repeat(t.data, r, axis=axis), (t,), backward)


def broadcast_to(t: Tensor, shape) -> Tensor:
    """Explicit expansion of size-1 axes (same rank) or of a 0-d scalar."""
    t = _as_tensor(t)
    shape = tuple(shape)
    if _broadcast_shape(t.shape, shape) != shape:
        raise ShapeError(f"cannot broadcast {t.shape} to {shape}")
    old = t.shape
    return Tensor.from_op(
        np.broadcast_to(t.data, shape).copy(), (t,), lambda g: (_unbroadcast(g, old),)
    )
