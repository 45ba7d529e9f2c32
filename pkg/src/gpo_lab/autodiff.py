"""Minimal reverse-mode differentiation over numpy arrays.

Only the handful of operations the policy losses are built from are supported.
A ``Var`` wraps an ndarray and records, for every parent, a vector-Jacobian
product.  Arithmetic goes through numpy's ufunc protocol, so the same code path
(``np.exp(x)``, ``x * y``, ``np.sum(x, axis=-1)``) runs on plain arrays and on
graph nodes.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _val(x):
    return x.value if isinstance(x, Var) else x


class Var:
    """Node in a differentiation graph."""

    __array_priority__ = 1000

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def reshape(self, *shape):
        old = self.shape
        return Var(self.value.reshape(*shape), ((self, lambda g: np.reshape(g, old)),))

    def __repr__(self):
        return f"Var({self.value!r})"

    # operators route through the ufunc protocol below
    def __add__(self, o):
        return np.add(self, o)

    def __radd__(self, o):
        return np.add(o, self)

    def __sub__(self, o):
        return np.subtract(self, o)

    def __rsub__(self, o):
        return np.subtract(o, self)

    def __mul__(self, o):
        return np.multiply(self, o)

    def __rmul__(self, o):
        return np.multiply(o, self)

    def __truediv__(self, o):
        return np.true_divide(self, o)

    def __rtruediv__(self, o):
        return np.true_divide(o, self)

    def __neg__(self):
        return np.negative(self)

    def __pow__(self, p):
        if isinstance(p, Var) or np.ndim(p) != 0:
            raise TypeError("only constant scalar exponents are supported")
        x = self.value
        return Var(x**p, ((self, lambda g: g * p * x ** (p - 1)),))

    def __getitem__(self, idx):
        shape = self.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return out

        return Var(self.value[idx], ((self, vjp),))

    def sum(self, axis=None, keepdims=False):
        return np.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return np.mean(self, axis=axis, keepdims=keepdims)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None:
            return NotImplemented
        rule = _UFUNC_RULES.get(ufunc)
        if rule is None:
            raise TypeError(f"ufunc {ufunc.__name__} is not differentiable here")
        vals = [_val(x) for x in inputs]
        out = ufunc(*vals)
        parents = tuple(
            (x, _wrap_vjp(vjp, x.shape))
            for x, vjp in zip(inputs, rule(out, *vals))
            if isinstance(x, Var)
        )
        return Var(out, parents)

    def __array_function__(self, func, types, args, kwargs):
        impl = _FUNCTION_RULES.get(func)
        if impl is None:
            raise TypeError(f"{func.__name__} is not differentiable here")
        return impl(*args, **kwargs)

    def backward(self):
        """Accumulate d(self)/d(node) into ``node.grad`` for every ancestor."""
        if self.value.size != 1:
            raise ValueError("backward() needs a scalar output")
        order, seen = [], set()
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
            for parent, _ in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(node.grad)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib


def _wrap_vjp(vjp, shape):
    return lambda g: _unbroadcast(np.asarray(vjp(g), dtype=float), shape)


def _minmax_rule(pick_first):
    def rule(out, x, y):
        first = pick_first(x, y)
        return (lambda g: g * first, lambda g: g * ~first)

    return rule


_UFUNC_RULES = {
    np.add: lambda out, x, y: (lambda g: g, lambda g: g),
    np.subtract: lambda out, x, y: (lambda g: g, lambda g: -g),
    np.multiply: lambda out, x, y: (lambda g: g * y, lambda g: g * x),
    np.true_divide: lambda out, x, y: (lambda g: g / y, lambda g: -g * x / (y * y)),
    np.negative: lambda out, x: (lambda g: -g,),
    np.exp: lambda out, x: (lambda g: g * out,),
    np.log: lambda out, x: (lambda g: g / x,),
    np.log1p: lambda out, x: (lambda g: g / (1.0 + x),),
    np.square: lambda out, x: (lambda g: 2.0 * g * x,),
    np.sqrt: lambda out, x: (lambda g: 0.5 * g / out,),
    np.tanh: lambda out, x: (lambda g: g * (1.0 - out * out),),
    np.abs: lambda out, x: (lambda g: g * np.sign(x),),
    np.minimum: _minmax_rule(lambda x, y: np.broadcast_to(x <= y, np.broadcast(x, y).shape)),
    np.maximum: _minmax_rule(lambda x, y: np.broadcast_to(x >= y, np.broadcast(x, y).shape)),
}


def _sum(x, axis=None, keepdims=False, **_):
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return Var(np.sum(x.value, axis=axis, keepdims=keepdims), ((x, vjp),))


def _mean(x, axis=None, keepdims=False, **_):
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return _sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def _clip(x, lo, hi, **_):
    xv = x.value
    out = np.clip(xv, lo, hi)
    inside = (xv > lo) & (xv < hi)
    return Var(out, ((x, lambda g: g * inside),))


def _where(cond, x, y):
    cond = np.asarray(cond)
    out = np.where(cond, _val(x), _val(y))
    parents = []
    if isinstance(x, Var):
        parents.append((x, _wrap_vjp(lambda g: np.where(cond, g, 0.0), x.shape)))
    if isinstance(y, Var):
        parents.append((y, _wrap_vjp(lambda g: np.where(cond, 0.0, g), y.shape)))
    return Var(out, tuple(parents))


_FUNCTION_RULES = {
    np.sum: _sum,
    np.mean: _mean,
    np.clip: _clip,
    np.where: _where,
}


def grad(fn, x):
    """Value and gradient of a scalar function of one array."""
    leaf = Var(x)
    out = fn(leaf)
    if not isinstance(out, Var):
        return float(out), np.zeros_like(leaf.value)
    out.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return float(out.value), g
