"""Dense tensors with a reverse-mode autodiff tape.

Every differentiable operation appends a :class:`Node` to an implicit tape.
Nodes carry a monotonically increasing sequence number, so creation order is
a valid topological order: a node's inputs always have smaller numbers.
:func:`backward` walks the reachable nodes once, newest first.

Arrays are float64 (gradient checks) or float32 (training); operations keep
the dtype of their tensor inputs.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int]

_seq = itertools.count()
_grad_enabled = True
_check_finite = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Node:
    """One tape entry: the op that produced a tensor and how to pull back its gradient."""

    __slots__ = ("op", "inputs", "vjp", "seq")

    def __init__(self, op: str, inputs: Sequence["Tensor"], vjp: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.vjp = vjp
        self.seq = next(_seq)

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if _check_finite and not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} holds non-finite values".replace("  ", " "))
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # --- introspection -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- operator sugar --------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmax(self, axis, keepdims)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


# --- global switches ---------------------------------------------------------


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def set_check_finite(enabled: bool) -> bool:
    """Toggle the per-op NaN/Inf assertion. Returns the previous setting."""
    global _check_finite
    prev, _check_finite = _check_finite, bool(enabled)
    return prev


@contextmanager
def check_finite(enabled: bool) -> Iterator[None]:
    prev = set_check_finite(enabled)
    try:
        yield
    finally:
        set_check_finite(prev)


# --- plumbing ------------------------------------------------------------------


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None:
        arr = arr.astype(like.dtype, copy=False)
    return Tensor(arr)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op's output and record it on the tape when any input needs a gradient.

    ``vjp(g)`` receives the output gradient and returns one array (or None) per input.
    """
    if _check_finite and not np.isfinite(data).all():
        raise NonFiniteError(f"op '{op}' produced non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = False
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, vjp)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def tape_of(loss: Tensor) -> list:
    """Nodes reachable from ``loss`` in recording (topological) order."""
    seen: dict = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or node.seq in seen:
            continue
        seen[node.seq] = (node, t)
        stack.extend(node.inputs)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` that ``loss`` depends on.

    Gradients accumulate across calls; reset with ``zero_grad`` between steps.
    Intermediate (non-leaf) tensors do not keep their gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    if grad is None:
        grad = np.ones_like(loss.data)
    grads: dict = {id(loss): np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)}
    for node, out in reversed(tape_of(loss)):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    if loss.node is None and loss.requires_grad:
        loss.grad = grads.get(id(loss))


# --- elementwise arithmetic ---------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_result("mul", ad * bd, (a, b),
                       lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return unbroadcast(ga, ad.shape), unbroadcast(-ga * out, bd.shape)

    return make_result("div", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result("log", np.log(ad), (a,), lambda g: (g / ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where clamping is active."""
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return make_result("clip", np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def _pair(a: ArrayLike, b: ArrayLike) -> tuple:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# --- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; extra leading dimensions are batch dimensions and must agree."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None,
                np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None)

    return make_result("matmul", ad @ bd, (a, b), vjp)


# --- shape manipulation -----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return make_result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                       lambda g: tuple(np.split(g, cuts, axis=axis)))


# --- reductions -------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_result("sum", np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    count = a.size if axis is None else int(np.prod([src[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return make_result("mean", np.asarray(out), (a,), vjp)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; ties route the whole gradient to the first maximum."""
    ad = a.data
    out = ad.max(axis=axis, keepdims=True)

    def vjp(g):
        if axis is None:
            mask = np.zeros(ad.size, dtype=ad.dtype)
            mask[np.argmax(ad)] = 1
            return (mask.reshape(ad.shape) * g.reshape(()),)
        idx = np.expand_dims(np.argmax(ad, axis=axis), axis)
        gk = g if keepdims else np.expand_dims(g, axis)
        res = np.zeros_like(ad)
        np.put_along_axis(res, idx, gk, axis=axis)
        return (res,)

    data = out if keepdims else (out.reshape(()) if axis is None else np.squeeze(out, axis))
    return make_result("max", np.asarray(data), (a,), vjp)


def randn(shape, seed: int, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    """Standard-normal tensor, a pure function of ``seed``."""
    data = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)
