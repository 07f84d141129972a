"""Vectorized automatic differentiation over numpy arrays.

Two modes share one primitive set:

* ``Var`` builds a reverse-mode tape. Calling :meth:`Var.backward` on a
  scalar output fills ``.grad`` on every node, which is how parameter
  gradients of the training losses are obtained.
* ``Dual`` carries a (value, tangent) pair forward, giving exact
  Jacobian-vector products in a single pass. Divergence computations use
  this mode.

Plain numpy arrays flow through the same code paths untouched (the helper
functions dispatch on type), so the network forward pass is written once
and evaluated with or without derivative tracking.

Only the primitives the field model and losses need are implemented:
broadcasting arithmetic, matmul, tanh/erf/exp/sqrt, reductions over the
last axis and over all elements. Scalar reductions accumulate in float64
regardless of the input dtype.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # Sum away prepended axes, then axes broadcast from length 1.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    """A node in the reverse-mode tape."""

    __slots__ = ("val", "grad", "_parents", "_vjp")

    # Make numpy defer mixed expressions to the reflected operators below.
    __array_ufunc__ = None

    def __init__(self, val, parents=(), vjp=None):
        self.val = np.asarray(val)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.val.shape

    @property
    def dtype(self):
        return self.val.dtype

    def _accum(self, g):
        g = _unbroadcast(np.asarray(g), self.val.shape)
        if self.grad is None:
            self.grad = g.astype(self.val.dtype, copy=True)
        else:
            self.grad += g.astype(self.val.dtype, copy=False)

    def backward(self, seed=None):
        """Reverse sweep from this node. ``seed`` defaults to 1 (scalar output)."""
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.val)
        self._accum(seed)
        for node in reversed(order):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Var):
            out = Var(self.val + other.val, (self, other))
            out._vjp = lambda g: (self._accum(g), other._accum(g))
        else:
            out = Var(self.val + other, (self,))
            out._vjp = lambda g: self._accum(g)
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Var(-self.val, (self,))
        out._vjp = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        if isinstance(other, Var):
            out = Var(self.val - other.val, (self, other))
            out._vjp = lambda g: (self._accum(g), other._accum(-g))
        else:
            out = Var(self.val - other, (self,))
            out._vjp = lambda g: self._accum(g)
        return out

    def __rsub__(self, other):
        out = Var(other - self.val, (self,))
        out._vjp = lambda g: self._accum(-g)
        return out

    def __mul__(self, other):
        if isinstance(other, Var):
            out = Var(self.val * other.val, (self, other))
            out._vjp = lambda g: (self._accum(g * other.val), other._accum(g * self.val))
        else:
            out = Var(self.val * other, (self,))
            out._vjp = lambda g: self._accum(g * other)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            out = Var(self.val / other.val, (self, other))

            def vjp(g):
                self._accum(g / other.val)
                other._accum(-g * self.val / (other.val * other.val))

            out._vjp = vjp
        else:
            out = Var(self.val / other, (self,))
            out._vjp = lambda g: self._accum(g / other)
        return out

    def __rtruediv__(self, other):
        out = Var(other / self.val, (self,))
        out._vjp = lambda g: self._accum(-g * other / (self.val * self.val))
        return out

    def __matmul__(self, other):
        if isinstance(other, Var):
            out = Var(self.val @ other.val, (self, other))

            def vjp(g):
                self._accum(g @ other.val.T)
                other._accum(self.val.T @ g)

            out._vjp = vjp
        else:
            out = Var(self.val @ other, (self,))
            out._vjp = lambda g: self._accum(g @ np.asarray(other).T)
        return out

    def __rmatmul__(self, other):
        other = np.asarray(other)
        out = Var(other @ self.val, (self,))
        out._vjp = lambda g: self._accum(other.T @ g)
        return out


class Dual:
    """Forward-mode pair (value, tangent). Tangent has the value's shape."""

    __slots__ = ("val", "tan")

    __array_ufunc__ = None

    def __init__(self, val, tan=None):
        self.val = np.asarray(val)
        self.tan = np.zeros_like(self.val) if tan is None else np.asarray(tan)

    @property
    def shape(self):
        return self.val.shape

    @staticmethod
    def _fit(tan, val):
        # Constants can broadcast the value up; the tangent must follow.
        return tan if tan.shape == val.shape else np.broadcast_to(tan, val.shape)

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.tan + other.tan)
        v = self.val + other
        return Dual(v, self._fit(self.tan, v))

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.tan)

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.tan - other.tan)
        v = self.val - other
        return Dual(v, self._fit(self.tan, v))

    def __rsub__(self, other):
        return Dual(other - self.val, -self.tan)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val, self.tan * other.val + self.val * other.tan)
        v = self.val * other
        return Dual(v, self._fit(np.asarray(self.tan * other), v))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            v = self.val / other.val
            return Dual(v, (self.tan - v * other.tan) / other.val)
        v = self.val / other
        return Dual(v, self._fit(np.asarray(self.tan / other), v))

    def __rtruediv__(self, other):
        v = other / self.val
        return Dual(v, -v * self.tan / self.val)

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val @ other.val, self.tan @ other.val + self.val @ other.tan)
        return Dual(self.val @ other, self.tan @ other)

    def __rmatmul__(self, other):
        other = np.asarray(other)
        return Dual(other @ self.val, other @ self.tan)


# -- dispatching elementwise primitives --------------------------------

_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


def tanh(x):
    if isinstance(x, Var):
        t = np.tanh(x.val)
        out = Var(t, (x,))
        out._vjp = lambda g: x._accum(g * (1.0 - t * t))
        return out
    if isinstance(x, Dual):
        t = np.tanh(x.val)
        return Dual(t, x.tan * (1.0 - t * t))
    return np.tanh(x)


def erf(x):
    if isinstance(x, Var):
        out = Var(special.erf(x.val), (x,))
        out._vjp = lambda g: x._accum(g * (2.0 * _INV_SQRT_PI) * np.exp(-x.val * x.val))
        return out
    if isinstance(x, Dual):
        return Dual(special.erf(x.val), x.tan * (2.0 * _INV_SQRT_PI) * np.exp(-x.val * x.val))
    return special.erf(x)


def exp(x):
    if isinstance(x, Var):
        e = np.exp(x.val)
        out = Var(e, (x,))
        out._vjp = lambda g: x._accum(g * e)
        return out
    if isinstance(x, Dual):
        e = np.exp(x.val)
        return Dual(e, x.tan * e)
    return np.exp(x)


def sqrt(x):
    if isinstance(x, Var):
        s = np.sqrt(x.val)
        out = Var(s, (x,))
        out._vjp = lambda g: x._accum(g / (2.0 * s))
        return out
    if isinstance(x, Dual):
        s = np.sqrt(x.val)
        return Dual(s, x.tan / (2.0 * s))
    return np.sqrt(x)


def mean_last(x):
    """Mean over the last axis, keepdims. Used by layer normalisation."""
    if isinstance(x, Var):
        n = x.val.shape[-1]
        out = Var(x.val.mean(axis=-1, keepdims=True), (x,))
        out._vjp = lambda g: x._accum(np.broadcast_to(g / n, x.val.shape))
        return out
    if isinstance(x, Dual):
        return Dual(x.val.mean(axis=-1, keepdims=True), x.tan.mean(axis=-1, keepdims=True))
    return x.mean(axis=-1, keepdims=True)


def sum_all(x):
    """Sum of all elements as a float64 scalar (stable loss accumulation)."""
    if isinstance(x, Var):
        out = Var(np.sum(x.val, dtype=np.float64), (x,))
        out._vjp = lambda g: x._accum(np.full(x.val.shape, g, dtype=x.val.dtype))
        return out
    if isinstance(x, Dual):
        return Dual(np.sum(x.val, dtype=np.float64), np.sum(x.tan, dtype=np.float64))
    return np.sum(x, dtype=np.float64)


def value_of(x):
    """Underlying numpy value of a Var, Dual, or plain array."""
    if isinstance(x, (Var, Dual)):
        return x.val
    return np.asarray(x)
