"""Dense arrays with reverse-mode differentiation.

Every op builds a new :class:`Tensor` holding references to its inputs and a
closure that maps the output gradient onto input gradients. ``backward`` walks
the resulting graph (the :class:`ComputationRecord`) in reverse topological
order and accumulates into ``.grad``.

Shape rules are strict: elementwise ops accept equal shapes, or a second
operand whose shape equals the trailing dims of the first (leading-batch
expansion, e.g. a bias vector against a batch of rows). Anything else raises
:class:`~must.errors.DimensionError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_DTYPE = np.float32
_GRAD_ENABLED = True


def set_precision(name: str) -> None:
    """Set the global float width: ``"float64"`` (gradcheck/tests) or ``"float32"``."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unknown precision {name!r}")
    _DTYPE = np.dtype(name).type


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(name: str):
    previous = np.dtype(_DTYPE).name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; results carry no parents."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    return out


class ComputationRecord:
    """Ops reachable from an output, in topological order (inputs first)."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
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
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def replay(self, seed_grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.output): seed_grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            # grads are never mutated in place, so sharing arrays is safe
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Gradients accumulate (``+=``) so callers must zero leaves between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    ComputationRecord(loss).replay(np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# shape helpers


def _expansion(a_shape, b_shape, op) -> None:
    if a_shape == b_shape:
        return
    short, long_ = (b_shape, a_shape) if len(b_shape) <= len(a_shape) else (a_shape, b_shape)
    if len(short) < len(long_) and tuple(long_[len(long_) - len(short):]) == tuple(short):
        return
    raise DimensionError(f"{op}: incompatible shapes {a_shape} and {b_shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _expansion(a.shape, b.shape, "add")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _expansion(a.shape, b.shape, "sub")

    def bw(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _expansion(a.shape, b.shape, "mul")

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0).astype(a.data.dtype), (a,), lambda g: (g * on,), "relu")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        return (g * _sigmoid(x),)

    return _make(out, (a,), bw, "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> np.ndarray:
    """Plain (non-differentiable) logistic function on arrays."""
    return _sigmoid(np.asarray(x, dtype=float))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    keep = (rng.random(a.shape, dtype=a.data.dtype) >= p).astype(a.data.dtype) / (1.0 - p)
    return apply_mask(a, keep, op="dropout")


def add_constant(a: Tensor, c: np.ndarray) -> Tensor:
    """``a + c`` for a constant array broadcast against ``a`` (e.g. -inf padding bias)."""
    c = np.asarray(c, dtype=a.data.dtype)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise DimensionError(f"add_constant: {c.shape} does not broadcast to {a.shape}")
    return _make(a.data + c, (a,), lambda g: (g,), "add_constant")


def apply_mask(a: Tensor, mask: np.ndarray, op: str = "mask") -> Tensor:
    """Multiply by a constant array, broadcast against ``a`` (no grad to the mask)."""
    m = np.broadcast_to(np.asarray(mask, dtype=a.data.dtype), a.shape)
    return _make(a.data * m, (a,), lambda g: (g * m,), op)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is either ``(k, n)`` (shared across the
    batch) or ``(..., k, n)`` with the same leading dims as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        k, n = b.shape

        def bw(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    else:

        def bw(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if out.ndim == 0:
        out = out.reshape(())

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), bw, "getitem")


# ---------------------------------------------------------------------------
# reductions


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ContractError(f"axis {axis} out of range for rank {a.ndim}")
    return axis % a.ndim


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
    ax = _check_axis(a, axis)
    return _make(a.data.sum(axis=ax), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[_check_axis(a, axis)]
    return scale(sum(a, axis), 1.0 / n)


def max(a: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; gradient goes to the first (lowest-index) argmax."""
    ax = _check_axis(a, axis)
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _make(out, (a,), bw, "max")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def standardize(a: Tensor, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis (biased variance)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gs = g.sum(axis=-1, keepdims=True)
        gx = (g * xhat).sum(axis=-1, keepdims=True)
        return (inv * (g - gs / n - xhat * gx / n),)

    return _make(xhat, (a,), bw, "standardize")


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
