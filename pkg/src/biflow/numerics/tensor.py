"""Dense arrays with a define-by-run tape for reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every op applied to tensors that
require gradients records its parents and a backward closure; :func:`grad`
walks that record in reverse topological order. The record is dropped after
the sweep unless ``retain_graph`` is set.
"""

from __future__ import annotations

import contextlib
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = {"grad_enabled": True, "row_invariant": False}


class UnreachedInputWarning(UserWarning):
    """An input passed to :func:`grad` did not participate in the loss."""


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def row_invariant():
    """Route matmuls through a kernel whose per-row result does not depend on
    how many rows are in the batch (BLAS gives no such guarantee).

    Sequential decoding relies on this so that a KV-cached step, a full-prefix
    recomputation and a cond/uncond-stacked batch agree bit for bit.
    """
    prev = _state["row_invariant"]
    _state["row_invariant"] = True
    try:
        yield
    finally:
        _state["row_invariant"] = prev


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


def is_row_invariant() -> bool:
    return _state["row_invariant"]


def _raw_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _state["row_invariant"]:
        # einsum's inner kernel depends on operand strides, so normalise them
        return np.einsum("...ik,...kj->...ij", np.ascontiguousarray(a), np.ascontiguousarray(b))
    return a @ b


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")
    # make ``ndarray <op> Tensor`` defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            # python scalars/lists and integer arrays take the default float width
            if not isinstance(data, (np.ndarray, np.generic)) or arr.dtype.kind != "f":
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> Tensor:
        return self.swapaxes(-1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        """Same values, cut from the tape (stop-gradient)."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        leaves = [n for n in _topo_order(self) if n.requires_grad and not n._parents]
        grads = grad(self, leaves, _warn=False)
        for leaf, g in zip(leaves, grads):
            leaf.grad = g if leaf.grad is None else leaf.grad + g

    # -- operator sugar -----------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const(x, like: Tensor) -> Tensor:
    """Wrap python scalars / arrays in the dtype of ``like`` (no silent upcast)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.reshape(-1, *g.shape[extra:]).sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _make(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through inside, zero outside."""
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions / shape --------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1) if a.data.size else 1
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _make(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    shape = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def flip(a: Tensor, axis: int) -> Tensor:
    return _make(np.flip(a.data, axis), (a,), lambda g: (np.flip(g, axis),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    cond = np.asarray(cond, dtype=bool)
    return _make(np.where(cond, a.data, b.data), (a, b), lambda g: (g * cond, g * ~cond))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # (..., k) @ (k, n): fold the leading axes into one GEMM instead of a
        # batch of tiny ones
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def backward_folded(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = _raw_matmul(g2, bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = _raw_matmul(a2.T, g2) if b.requires_grad else None
            return ga, gb

        out = _raw_matmul(a2, bd).reshape(*lead, bd.shape[-1])
        return _make(out, (a, b), backward_folded)

    def backward(g):
        ga = _raw_matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = _raw_matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _make(_raw_matmul(ad, bd), (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    e = np.exp(ad - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


# -- tape sweep ----------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def grad(loss: Tensor, inputs: Iterable[Tensor], retain_graph: bool = False,
         _warn: bool = True) -> list[np.ndarray]:
    """Return d(loss)/d(input) for every input, as numpy arrays.

    Inputs that did not participate in ``loss`` get a zero array and trigger an
    :class:`UnreachedInputWarning`.
    """
    inputs = list(inputs)
    if loss.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    wanted = {id(t): i for i, t in enumerate(inputs)}
    found: list[np.ndarray | None] = [None] * len(inputs)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in wanted:
            found[wanted[id(node)]] = g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg), p.shape)
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    if not retain_graph:
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None
    out = []
    for t, g in zip(inputs, found):
        if g is None:
            if _warn:
                warnings.warn("input did not participate in the loss; gradient is zero",
                              UnreachedInputWarning, stacklevel=2)
            g = np.zeros_like(t.data)
        out.append(np.array(g, dtype=t.dtype, copy=True))
    return out
