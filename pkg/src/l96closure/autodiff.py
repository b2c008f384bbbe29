"""Reverse-mode automatic differentiation on a fixed-structure tape.

The only programs differentiated in this package are compositions of dense
layers, elementwise nonlinearities and RK4 time-stepping arithmetic, so a
small tape over numpy arrays is sufficient: each `Tensor` records its value
and the vector-Jacobian products of its parents. Gradients are exact to
machine precision.
"""

from __future__ import annotations

import numpy as np

from .errors import GradientFailure

__all__ = [
    "Tensor",
    "constant",
    "leaf",
    "tanh",
    "relu",
    "absolute",
    "square",
    "roll",
    "stack",
    "concatenate",
    "matmul",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "backward",
    "grad_through",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # Added leading axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    # Axes broadcast from size 1
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """A node on the tape: a float64 array plus backprop bookkeeping."""

    __slots__ = ("value", "grad", "parents", "requires_grad")

    # Make ndarray <op> Tensor defer to the reflected Tensor ops instead of
    # silently building object arrays.
    __array_ufunc__ = None

    def __init__(self, value, parents=(), requires_grad=True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        # parents: sequence of (Tensor, vjp) where vjp maps the output
        # cotangent to this parent's cotangent contribution.
        self.parents = tuple(p for p in parents if p[0].requires_grad)
        self.requires_grad = requires_grad and (bool(self.parents) or not parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        o = _as_tensor(other)
        return Tensor(
            self.value + o.value,
            parents=[
                (self, lambda g: _unbroadcast(g, self.value.shape)),
                (o, lambda g: _unbroadcast(g, o.value.shape)),
            ],
        )

    __radd__ = __add__

    def __sub__(self, other):
        o = _as_tensor(other)
        return Tensor(
            self.value - o.value,
            parents=[
                (self, lambda g: _unbroadcast(g, self.value.shape)),
                (o, lambda g: _unbroadcast(-g, o.value.shape)),
            ],
        )

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        o = _as_tensor(other)
        return Tensor(
            self.value * o.value,
            parents=[
                (self, lambda g: _unbroadcast(g * o.value, self.value.shape)),
                (o, lambda g: _unbroadcast(g * self.value, o.value.shape)),
            ],
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not on the tape; multiply by a reciprocal")
        c = np.asarray(other, dtype=np.float64)
        return self * (1.0 / c)

    def __neg__(self):
        return Tensor(-self.value, parents=[(self, lambda g: -g)])

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_as_tensor(other), self)

    def __getitem__(self, key):
        val = self.value[key]
        parts = key if isinstance(key, tuple) else (key,)
        basic = all(isinstance(p, (int, np.integer, slice)) for p in parts)

        def vjp(g, key=key, basic=basic):
            out = np.zeros_like(self.value)
            if basic:
                # Basic indexing never selects an element twice, so a plain
                # in-place add suffices.
                out[key] += g
            else:
                np.add.at(out, key, g)
            return out

        return Tensor(val, parents=[(self, vjp)])


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False)


def constant(x) -> Tensor:
    """Wrap an array as an off-tape constant."""
    return Tensor(x, requires_grad=False)


def leaf(x) -> Tensor:
    """Wrap an array as a differentiable tape input."""
    return Tensor(x)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    val = a.value @ b.value
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul on the tape is restricted to 2-D operands")
    return Tensor(
        val,
        parents=[
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ],
    )


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    val = np.tanh(x.value)
    return Tensor(val, parents=[(x, lambda g: g * (1.0 - val * val))])


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.value > 0.0
    return Tensor(x.value * mask, parents=[(x, lambda g: g * mask)])


def absolute(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = np.sign(x.value)
    return Tensor(np.abs(x.value), parents=[(x, lambda g: g * s)])


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return Tensor(x.value * x.value, parents=[(x, lambda g: g * (2.0 * x.value))])


def roll(x, shift: int, axis: int = -1):
    """Cyclic shift; dispatches to np.roll for plain arrays."""
    if not isinstance(x, Tensor):
        return np.roll(x, shift, axis=axis)
    return Tensor(
        np.roll(x.value, shift, axis=axis),
        parents=[(x, lambda g: np.roll(g, -shift, axis=axis))],
    )


def stack(parts, axis: int = -1):
    """Stack tensors/arrays along a new axis."""
    if not any(isinstance(p, Tensor) for p in parts):
        return np.stack(parts, axis=axis)
    tparts = [_as_tensor(p) for p in parts]
    val = np.stack([p.value for p in tparts], axis=axis)
    parents = []
    for i, p in enumerate(tparts):
        idx = [slice(None)] * val.ndim
        idx[axis if axis >= 0 else val.ndim + axis] = i
        idx = tuple(idx)
        parents.append((p, lambda g, idx=idx: g[idx]))
    return Tensor(val, parents=parents)


def concatenate(parts, axis: int = 0):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    tparts = [_as_tensor(p) for p in parts]
    val = np.concatenate([p.value for p in tparts], axis=axis)
    parents = []
    offset = 0
    ax = axis if axis >= 0 else val.ndim + axis
    for p in tparts:
        n = p.value.shape[ax]
        idx = [slice(None)] * val.ndim
        idx[ax] = slice(offset, offset + n)
        idx = tuple(idx)
        parents.append((p, lambda g, idx=idx: g[idx]))
        offset += n
    return Tensor(val, parents=parents)


def reshape(x, shape):
    if not isinstance(x, Tensor):
        return np.reshape(x, shape)
    old = x.value.shape
    return Tensor(
        x.value.reshape(shape),
        parents=[(x, lambda g: g.reshape(old))],
    )


def tensor_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.value.shape
    return Tensor(x.value.sum(), parents=[(x, lambda g: np.broadcast_to(g, shape).copy())])


def tensor_mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.value.size
    shape = x.value.shape
    return Tensor(
        x.value.mean(),
        parents=[(x, lambda g: np.broadcast_to(g / n, shape).copy())],
    )


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents before children


def backward(root: Tensor):
    """Accumulate gradients of the scalar `root` into `.grad` of every node."""
    if root.value.ndim != 0:
        raise ValueError("backward requires a scalar root")
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones(())
    # A vjp may hand back an array it does not own (for instance the output
    # cotangent itself when no broadcasting occurred), so only accumulate in
    # place into buffers this loop has allocated.
    owned = set()
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(node.grad)
            if parent.grad is None:
                parent.grad = contrib
            elif id(parent.grad) in owned:
                parent.grad += contrib
            else:
                parent.grad = parent.grad + contrib
                owned.add(id(parent.grad))


def grad_through(objective, params: np.ndarray):
    """Evaluate `objective(theta)` and its gradient with respect to theta.

    `objective` takes a leaf Tensor of the flat parameter vector and must
    return a scalar Tensor built from tape operations.
    """
    theta = leaf(np.asarray(params, dtype=np.float64))
    out = objective(theta)
    if not isinstance(out, Tensor):
        raise TypeError("objective must return a tape Tensor")
    if not np.isfinite(out.value):
        raise GradientFailure("objective value is non-finite")
    backward(out)
    grad = theta.grad
    if grad is None:
        grad = np.zeros_like(theta.value)
    if not np.all(np.isfinite(grad)):
        raise GradientFailure("gradient contains non-finite entries")
    return float(out.value), np.asarray(grad, dtype=np.float64)
