"""Dense tensor with a reverse-mode tape.

Every op that touches a tensor with ``requires_grad`` records a
:class:`TapeNode` on its output. :meth:`Tensor.backward` walks the nodes
reachable from a scalar loss once each, in reverse topological order, and
sums contributions from every downstream use. Gradients are always held in
float64, whatever the data dtype.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "NonFiniteError",
    "as_tensor",
    "checking_finite",
    "default_dtype",
    "set_default_dtype",
    "verification_mode",
    "finite_diff_grad",
    "no_grad",
]


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN/Inf while checking is on."""


class _Settings:
    check_finite: bool = os.environ.get("WSNORM_CHECK_FINITE", "1") != "0"
    # Fixed summation order for convolution products (no BLAS reductions).
    ordered: bool = False
    dtype = np.float64
    grad_enabled: bool = True


_settings = _Settings()


def default_dtype():
    return _settings.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _settings.dtype = dtype.type


@contextlib.contextmanager
def checking_finite(enabled: bool = True):
    old = _settings.check_finite
    _settings.check_finite = enabled
    try:
        yield
    finally:
        _settings.check_finite = old


@contextlib.contextmanager
def verification_mode(enabled: bool = True):
    """64-bit default dtype and fixed-order convolution accumulation."""
    old = (_settings.ordered, _settings.dtype)
    _settings.ordered = enabled
    if enabled:
        _settings.dtype = np.float64
    try:
        yield
    finally:
        _settings.ordered, _settings.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _settings.grad_enabled
    _settings.grad_enabled = False
    try:
        yield
    finally:
        _settings.grad_enabled = old


def _check(arr: np.ndarray, what: str) -> None:
    if _settings.check_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


@dataclass
class TapeNode:
    op: str
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    consumed: bool = field(default=False)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _settings.dtype
        self.data = np.require(data, dtype=dtype, requirements="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: TapeNode | None = None
        self._retain = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        op = self._node.op if self._node is not None else "leaf"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}, op={op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def retain_grad(self) -> Tensor:
        """Keep ``grad`` on this (non-leaf) tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    # -- tape -------------------------------------------------------------
    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
        _check(data, f"forward of {op}")
        out = Tensor(data, dtype=data.dtype)
        if _settings.grad_enabled and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
            out.requires_grad = True
            out._node = TapeNode(op, parents, backward)
        return out

    def backward(self) -> None:
        if self.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss is detached from the tape (no input requires grad)")
        if self._node is None:
            self.grad = np.ones(self.shape) if self.grad is None else self.grad + 1.0
            return
        if self._node.consumed:
            raise RuntimeError("backward called twice on the same graph; rebuild the forward pass")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones(self.shape, dtype=np.float64)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            if node is None or t._retain:
                t.grad = g.copy() if t.grad is None else t.grad + g
            if node is None:
                continue
            parent_grads = node.backward(g)
            node.consumed = True
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                _check(pg, f"backward of {node.op}")
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- arithmetic -------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def sqrt(self) -> Tensor:
        return sqrt(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_settings.dtype))


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _shape(x) -> tuple:
    return np.shape(_data(x))


def add(a, b) -> Tensor:
    sa, sb = _shape(a), _shape(b)
    out = np.add(_data(a), _data(b))

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    sa, sb = _shape(a), _shape(b)
    out = np.subtract(_data(a), _data(b))

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = np.multiply(da, db)

    def backward(g):
        return _unbroadcast(g * db, np.shape(da)), _unbroadcast(g * da, np.shape(db))

    return Tensor._from_op(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = np.divide(da, db)

    def backward(g):
        ga = g / db
        return _unbroadcast(ga, np.shape(da)), _unbroadcast(-ga * out, np.shape(db))

    return Tensor._from_op(out, (a, b), backward, "div")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return Tensor._from_op(out, (a,), backward, "sqrt")


def square(a: Tensor) -> Tensor:
    da = a.data

    def backward(g):
        return (2.0 * g * da,)

    return Tensor._from_op(da * da, (a,), backward, "square")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "mean")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return Tensor._from_op(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return Tensor._from_op(a.data.transpose(axes), (a,), backward, "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    da, db = _data(a), _data(b)
    out = da @ db

    def backward(g):
        return g @ db.T, da.T @ g

    return Tensor._from_op(out, (a, b), backward, "matmul")


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per element."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros(base.shape)
    flat, gflat = base.reshape(-1), grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = float(_data(f(Tensor(base.astype(x.dtype), dtype=x.dtype))).reshape(-1)[0])
            flat[i] = keep - h
            fm = float(_data(f(Tensor(base.astype(x.dtype), dtype=x.dtype))).reshape(-1)[0])
            flat[i] = keep
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad
