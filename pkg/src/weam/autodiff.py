"""A small tape-based reverse-mode autodiff engine on top of numpy.

Every op creates a new :class:`Tensor` stamped with a monotonically increasing
id.  ``backward`` collects the nodes reachable from the loss and walks them in
strictly decreasing id order, which is a valid reverse topological order since
an op's inputs always exist before the op itself.

Binary ops require equal shapes, or one operand being a 0-d scalar.  Anything
else has to be made explicit with :func:`expand`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DeterminismError,
    DimensionError,
    DomainError,
    GradientCheckError,
    NumericInputError,
)

_state = {"dtype": np.float32, "grad": True}
_ids = itertools.count()


def get_dtype():
    return _state["dtype"]


def set_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    old = _state["dtype"]
    set_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.array(data, dtype=dtype or _state["dtype"])
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._id = next(_ids)
        self.name = name

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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # only scalar broadcasting exists, so the reduction is a full sum
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (use expand)")


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _reduce_to(g * bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _reduce_to(g / bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def shift(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _node(x.data + c, (x,), lambda g: (g,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # tanh form avoids overflow in exp for large |x|
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = xd**p
    return _node(out, (x,), lambda g: (g * p * xd ** (p - 1.0),))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "where")
    cond = np.asarray(cond, dtype=bool)
    shape = np.broadcast_shapes(a.shape, b.shape)
    if cond.shape != shape:
        raise DimensionError(f"where: condition shape {cond.shape} vs operands {shape}")
    sa, sb = a.shape, b.shape

    def bw(g):
        zero = np.zeros((), g.dtype)
        ga = _reduce_to(np.where(cond, g, zero), sa) if a.requires_grad else None
        gb = _reduce_to(np.where(cond, zero, g), sb) if b.requires_grad else None
        return ga, gb

    return _node(np.where(cond, a.data, b.data), (a, b), bw)


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch an elementwise op by name (``scale`` takes ``(x, factor)``)."""
    if kind in _UNARY:
        return _UNARY[kind](*operands)
    if kind in _BINARY:
        return _BINARY[kind](*operands)
    if kind == "scale":
        return scale(*operands)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """``np.matmul`` for 2-D x 2-D, N-D x 2-D (shared weight) and batched 3-D x 3-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with the bias broadcast over leading axes."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (wd.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} vs weight {w.shape}")
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node(out, parents, bw)


# --------------------------------------------------------------------------
# reductions and normalisation


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def _check_finite(x: np.ndarray) -> None:
    if np.isnan(x).any():
        raise NumericInputError("NaN in softmax input")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out,)

    return _node(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), bw)


# --------------------------------------------------------------------------
# shape manipulation


def expand(x, shape: tuple) -> Tensor:
    """Explicit numpy-style broadcast of ``x`` to ``shape``."""
    x = as_tensor(x)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot expand {src} to {shape}") from exc
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(i + lead for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        return (g.sum(axis=axes).reshape(src) if axes else g,)

    return _node(out, (x,), bw)


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {shape}") from exc
    return _node(out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype)
        if isinstance(index, np.ndarray) or (
            isinstance(index, tuple) and any(isinstance(i, np.ndarray) for i in index)
        ):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _node(x.data[index], (x,), bw)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero parts")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: inconsistent shapes {ref} and {p.shape} on axis {axis}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), bw)


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("stack of zero parts")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape != ref:
            raise DimensionError(f"stack: shapes {ref} and {p.shape} differ")
    n = len(parts)

    def bw(g):
        return tuple(np.squeeze(s, axis=axis) for s in np.split(g, n, axis=axis))

    return _node(np.stack([p.data for p in parts], axis=axis), tuple(parts), bw)


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-D table; the gradient scatters back into those rows only."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape, dtype = table.shape, table.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _node(table.data[ids], (table,), bw)


# --------------------------------------------------------------------------
# backward


class Graph:
    """Append-ordered record of the ops that contributed to a tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        seen = {root._id: root}
        stack_ = [root]
        while stack_:
            node = stack_.pop()
            for p in node._parents:
                if p.requires_grad and p._id not in seen:
                    seen[p._id] = p
                    stack_.append(p)
        return cls(sorted(seen.values(), key=lambda t: t._id))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.trace(loss)
    grads = {loss._id: np.ones(loss.shape, loss.data.dtype)}
    for node in reversed(graph.nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(p._id)
            grads[p._id] = gp if prev is None else prev + gp


# --------------------------------------------------------------------------
# finite-difference checking


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    tolerance: float | None = None,
    floor: float = 1e-6,
) -> float:
    """Compare backward gradients of ``f()`` with central differences.

    Returns the largest relative error ``|a - n| / max(|a|, |n|, floor')``
    with ``floor' = floor * max(1, |f|)``.  Central differences carry
    round-off of roughly ``1e-16 * |f| / eps`` (about 1e-11 here), so
    coordinates far below ``floor'`` cannot be resolved to a relative
    tolerance; the floor turns them into an absolute comparison at
    ``tolerance * floor'`` instead of skipping them.  When ``tolerance`` is
    given a larger error raises :class:`GradientCheckError`.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 parameters")
    with no_grad():
        v1, v2 = f().item(), f().item()
    if v1 != v2:
        raise DeterminismError(f"f is not deterministic: {v1!r} vs {v2!r}")

    for p in params:
        p.grad = None
    out = f()
    backward(out)
    floor = floor * max(1.0, abs(out.item()))
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            flat = p.data.reshape(-1)
            ana = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                a = ana[i]
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    if tolerance is not None and worst > tolerance:
        raise GradientCheckError(f"max relative error {worst:.3e} exceeds {tolerance:.1e}")
    return worst
