"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation builds a graph node holding its parents and a closure that
maps the output gradient to parent gradients. ``backward(loss)`` walks that
graph once in reverse topological order; the graph itself is the tape. All
arithmetic stays in 64-bit precision.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "GradientError",
    "backward",
    "zero_grads",
    "concat",
    "maximum",
    "logsumexp",
    "no_grad",
]

_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction (forward-only work)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False

_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


class GradientError(RuntimeError):
    """Raised when a backward pass is started from a non-finite loss."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 ndarray plus the graph edge needed for backprop."""

    __slots__ = ("_data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        # always an ndarray: 0-d arithmetic degrades to immutable numpy
        # scalars, which would silently break in-place updates
        self._data = np.asarray(value, dtype=np.float64)

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A constant view of this value, cut off from the graph."""
        return Tensor(self.data)

    # -- graph construction ---------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _node(data, parents, backward_fn) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        return self._node(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        return self._node(
            self.data * other.data,
            (self, other),
            lambda g: (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            ),
        )

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self._node(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = self._lift(other)
        return self._node(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other) - self

    def __truediv__(self, other) -> "Tensor":
        other = self._lift(other)
        return self._node(
            self.data / other.data,
            (self, other),
            lambda g: (
                _unbroadcast(g / other.data, self.shape),
                _unbroadcast(-g * self.data / (other.data * other.data), other.shape),
            ),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return self._lift(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        e = float(exponent)
        if e == 0.0:
            # x**0 == 1 with zero derivative; avoids 0 * x**-1 NaNs.
            return self._node(np.ones_like(self.data), (self,), lambda g: (np.zeros_like(g),))
        return self._node(
            self.data ** e,
            (self,),
            lambda g: (g * e * self.data ** (e - 1.0),),
        )

    def __matmul__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self.data, other.data

        def bw(g: np.ndarray):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return self._node(a @ b, (self, other), bw)

    # -- reductions -----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        def bw(g: np.ndarray):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, self.shape).copy(),)

        return self._node(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis] if isinstance(axis, int) else int(
                np.prod([self.data.shape[a] for a in axis])
            )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        """Max along one axis; ties share the gradient equally."""
        out = self.data.max(axis=axis, keepdims=True)
        mask = (self.data == out).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True)

        def bw(g: np.ndarray):
            gg = g if keepdims else np.expand_dims(g, axis)
            return (mask * gg,)

        return self._node(out if keepdims else out.squeeze(axis=axis), (self,), bw)

    # -- elementwise ----------------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return self._node(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        return self._node(np.log(self.data), (self,), lambda g: (g / self.data,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return self._node(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return self._node(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self) -> "Tensor":
        # exp of the negated magnitude never overflows
        x = self.data
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return self._node(out, (self,), lambda g: (g * out * (1.0 - out),))

    def relu(self) -> "Tensor":
        out = np.maximum(self.data, 0.0)
        return self._node(out, (self,), lambda g: (g * (self.data > 0.0),))

    def abs(self) -> "Tensor":
        return self._node(np.abs(self.data), (self,), lambda g: (g * np.sign(self.data),))

    def erf(self) -> "Tensor":
        x = self.data
        return self._node(_erf(x), (self,), lambda g: (g * _TWO_OVER_SQRT_PI * np.exp(-x * x),))

    # -- shape ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self._node(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(self.shape),)
        )

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return self._node(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),)
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return self._node(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),)
        )

    def __getitem__(self, key) -> "Tensor":
        advanced = isinstance(key, (np.ndarray, list)) or (
            isinstance(key, tuple) and any(isinstance(k, (np.ndarray, list)) for k in key)
        )

        def bw(g: np.ndarray):
            buf = np.zeros(self.shape, dtype=np.float64)
            if advanced:
                np.add.at(buf, key, g)
            else:
                buf[key] += g
            return (buf,)

        return self._node(self.data[key], (self,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; gradient splits back at the seams."""
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g: np.ndarray):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return Tensor._node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    b = Tensor._lift(b)
    take_a = a.data >= b.data
    return Tensor._node(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        ),
    )


def logsumexp(z: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp along ``axis``.

    The max shift is a constant; the identity lse(z) = m + log Σ exp(z - m)
    holds (with the exact gradient) for any constant m.
    """
    m = np.max(z.data, axis=axis, keepdims=True)
    shifted = z - Tensor(m)
    out = shifted.exp().sum(axis=axis, keepdims=True).log() + Tensor(m)
    if not keepdims:
        out = out.reshape(tuple(n for i, n in enumerate(out.shape) if i != (axis % out.ndim)))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``loss`` must be a finite scalar; a NaN/Inf loss aborts with diagnostics
    so a poisoned batch never turns into a silent parameter update.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise GradientError(f"non-finite loss {float(loss.data)!r}; batch aborted")

    # iterative topological order (graphs can exceed the recursion limit)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = np.asarray(g if node.grad is None else node.grad + g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = np.asarray(grads[key] + pg)
            else:
                grads[key] = np.asarray(pg)


def zero_grads(params) -> None:
    """Clear ``.grad`` on every tensor in a dict or iterable of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None
