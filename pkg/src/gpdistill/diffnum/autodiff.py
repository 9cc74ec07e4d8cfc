"""Tensor-level reverse-mode automatic differentiation on numpy arrays.

Each :class:`Var` records its parents together with a vector-Jacobian
product closure.  :func:`grad` topologically sorts the recorded graph and
accumulates cotangents.  Backward closures work on plain arrays, so the
graph is first-order; second derivatives are obtained by building the
first derivative out of :class:`Var` operations and differentiating that
graph (see :meth:`~gpdistill.diffnum.nets.DenseNetwork.input_gradient`).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = ["Var", "grad", "value_of", "as_var", "concat", "sqrt_safe", "GradientError", "diagnostics"]


class GradientError(ValueError):
    pass


#: Counters bumped by non-differentiable corner cases.
diagnostics = {"sqrt_below_eps": 0, "clamped": 0}


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Var:
    __slots__ = ("value", "parents", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), requires_grad=None, name=None):
        self.value = np.asarray(value, dtype=float)
        self.parents = tuple(parents)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p, _ in self.parents)
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return Var(self.value.T, [(self, lambda g: g.T)])

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        other = as_var(other)
        a, b = self.shape, other.shape
        return Var(self.value + other.value, [(self, lambda g: _unbroadcast(g, a)), (other, lambda g: _unbroadcast(g, b))])

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, [(self, lambda g: -g)])

    def __sub__(self, other):
        return self + (-as_var(other))

    def __rsub__(self, other):
        return as_var(other) + (-self)

    def __mul__(self, other):
        other = as_var(other)
        x, y = self.value, other.value
        return Var(x * y, [(self, lambda g: _unbroadcast(g * y, x.shape)), (other, lambda g: _unbroadcast(g * x, y.shape))])

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_var(other)
        x, y = self.value, other.value
        return Var(
            x / y,
            [(self, lambda g: _unbroadcast(g / y, x.shape)), (other, lambda g: _unbroadcast(-g * x / (y * y), y.shape))],
        )

    def __rtruediv__(self, other):
        return as_var(other) / self

    def __pow__(self, p):
        p = float(p)
        x = self.value
        return Var(x**p, [(self, lambda g: g * p * x ** (p - 1.0))])

    def __matmul__(self, other):
        other = as_var(other)
        x, y = self.value, other.value
        if x.ndim != 2 or y.ndim != 2:
            raise GradientError("matmul supports 2-D operands only")
        return Var(x @ y, [(self, lambda g: g @ y.T), (other, lambda g: x.T @ g)])

    def __rmatmul__(self, other):
        return as_var(other) @ self

    def __getitem__(self, idx):
        x = self.value

        basic = isinstance(idx, slice) or (
            isinstance(idx, tuple) and all(isinstance(i, (slice, int)) for i in idx)
        )

        def back(g):
            out = np.zeros_like(x)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return out

        return Var(x[idx], [(self, back)])

    # -- reductions ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        x = self.value

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, x.shape).copy()

        return Var(x.sum(axis=axis, keepdims=keepdims), [(self, back)])

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        x = self.value
        return Var(x.reshape(*shape), [(self, lambda g: g.reshape(x.shape))])

    # -- elementwise functions -----------------------------------------
    def exp(self):
        y = np.exp(self.value)
        return Var(y, [(self, lambda g: g * y)])

    def log(self):
        x = self.value
        return Var(np.log(x), [(self, lambda g: g / x)])

    def tanh(self):
        y = np.tanh(self.value)
        return Var(y, [(self, lambda g: g * (1.0 - y * y))])

    def sigmoid(self):
        y = _sigmoid(self.value)
        return Var(y, [(self, lambda g: g * y * (1.0 - y))])

    def log_sigmoid(self):
        x = self.value
        y = -_softplus(-x)
        return Var(y, [(self, lambda g: g * _sigmoid(-x))])

    def softplus(self):
        x = self.value
        return Var(_softplus(x), [(self, lambda g: g * _sigmoid(x))])

    def clamp_straight_through(self, lo, hi):
        """Clip values; the backward pass treats the clip as identity."""
        x = self.value
        y = np.clip(x, lo, hi)
        n = int(np.count_nonzero(y != x))
        if n:
            diagnostics["clamped"] += n
        return Var(y, [(self, lambda g: g)])

    def minimum(self, c: float):
        """Elementwise min with a constant; zero gradient where clipped."""
        x = self.value
        mask = x <= c
        return Var(np.where(mask, x, c), [(self, lambda g: g * mask)])


def _sigmoid(x):
    return expit(np.asarray(x, dtype=float))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x, requires_grad=False)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def concat(vars_, axis=-1) -> Var:
    vars_ = [as_var(v) for v in vars_]
    sizes = [v.shape[axis] for v in vars_]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([v.value for v in vars_], axis=axis)

    def make(i):
        def back(g):
            return np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)

        return back

    return Var(out, [(v, make(i)) for i, v in enumerate(vars_)])


def sqrt_safe(x: Var, eps: float = 1e-24) -> Var:
    """sqrt with zero gradient where the argument is below ``eps``.

    ``eps`` applies to the squared quantity, i.e. norms below 1e-12.
    """
    x = as_var(x)
    v = x.value
    y = np.sqrt(np.maximum(v, 0.0))
    small = v < eps
    if np.any(small):
        diagnostics["sqrt_below_eps"] += int(np.count_nonzero(small))

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(small, 0.0, g * 0.5 / np.where(small, 1.0, y))
        return out

    return Var(y, [(x, back)])


def grad(output: Var, params) -> list[np.ndarray]:
    """Gradient of a scalar ``output`` with respect to each of ``params``."""
    if output.value.size != 1:
        raise GradientError(f"grad needs a scalar output, got shape {output.value.shape}")
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, _ in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    cot: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    for node in reversed(order):
        g = cot.pop(id(node), None) if node.parents else cot.get(id(node))
        if g is None:
            continue
        for p, back in node.parents:
            if not p.requires_grad:
                continue
            contrib = back(g)
            k = id(p)
            if k in cot:
                cot[k] = cot[k] + contrib
            else:
                cot[k] = contrib
    return [cot.get(id(p), np.zeros_like(p.value)) for p in params]
