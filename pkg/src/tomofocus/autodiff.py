"""Minimal tape-free reverse-mode differentiation over numpy arrays.

Each ``Tensor`` remembers its parents and a closure that pushes its gradient
back to them.  ``Tensor.backward`` walks the graph in reverse topological
order.  Only the handful of primitives the unfolded network needs are
provided, including a fused piecewise-linear shrinkage whose divergence
output is differentiable with respect to the slopes.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to the reflected Tensor method

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name})"

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad += g

    # graph construction -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        parents = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
        out = Tensor(data, requires_grad=bool(parents))
        if parents:
            out._parents = parents
            out._backward = backward
        return out

    def backward(self, grad=None):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, float)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        a, b = self, _wrap(other)
        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))
        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a._accum(-g))

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        a, b = self, _wrap(other)
        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))
        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _wrap(other)
        out = a.data / b.data
        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * out / b.data, b.data.shape))
        return Tensor._make(out, (a, b), bw)

    def __rtruediv__(self, other):
        return _wrap(other) / self


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# primitives ----------------------------------------------------------------

def linear(x, W):
    """Row-wise ``W @ x``, i.e. ``x @ W.T`` for a batch of row vectors."""
    x, W = _wrap(x), _wrap(W)
    def bw(g):
        if x.requires_grad:
            x._accum(g @ W.data)
        if W.requires_grad:
            if g.ndim == 1:
                W._accum(np.outer(g, x.data))
            else:
                W._accum(g.T @ x.data)
    return Tensor._make(x.data @ W.data.T, (x, W), bw)


def mean_last(x):
    x = _wrap(x)
    n = x.data.shape[-1]
    return Tensor._make(x.data.mean(axis=-1, keepdims=True), (x,),
                        lambda g: x._accum(np.broadcast_to(g / n, x.data.shape)))


def diag_mean(G):
    """trace(G) / n for a square matrix."""
    G = _wrap(G)
    n = G.data.shape[0]
    return Tensor._make(np.trace(G.data) / n, (G,),
                        lambda g: G._accum(np.eye(n) * (float(np.sum(g)) / n)))


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient passes strictly inside, zero at the bounds."""
    x = _wrap(x)
    inside = (x.data > lo) & (x.data < hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: x._accum(g * inside))


def sum_squares(x):
    x = _wrap(x)
    return Tensor._make(np.sum(x.data * x.data), (x,), lambda g: x._accum(2 * g * x.data))


def pwlin_shrink(v, chi, theta):
    """Fused odd piecewise-linear shrinkage returning ``(out, slope)`` tensors.

    ``theta[:, 0:2]`` scale the knots by ``sqrt(chi)``; ``theta[:, 2:5]`` are the
    three segment slopes.  ``slope`` is the active segment slope, which depends
    on the slopes only (it is piecewise constant in v, chi and the knots).
    """
    v, chi, theta = _wrap(v), _wrap(chi), _wrap(theta)
    th = theta.data
    sig = np.sqrt(chi.data)
    t1, t2 = th[:, 0] * sig, th[:, 1] * sig
    a, b, c = th[:, 2], th[:, 3], th[:, 4]
    u = np.abs(v.data)
    sgn = np.sign(v.data)
    in2 = u > t1
    in3 = u > t2
    only2 = in2 & ~in3
    in1 = ~in2
    f = np.where(in3, a * t1 + b * (t2 - t1) + c * (u - t2),
                 np.where(in2, a * t1 + b * (u - t1), a * u))
    slope = np.where(in3, c, np.where(in2, b, a))

    def bw_out(g):
        if v.requires_grad:
            v._accum(_unbroadcast(g * slope, v.data.shape))
        gs = g * sgn
        d_t1 = np.where(in2, a - b, 0.0)
        d_t2 = np.where(in3, b - c, 0.0)
        if chi.requires_grad:
            with np.errstate(divide="ignore", invalid="ignore"):
                dchi = np.where(sig > 0, gs * (d_t1 * th[:, 0] + d_t2 * th[:, 1]) / (2 * sig), 0.0)
            chi._accum(_unbroadcast(dchi, chi.data.shape))
        if theta.requires_grad:
            sig_b = np.broadcast_to(sig, u.shape)
            gt = np.zeros_like(th)
            gt[:, 0] = _rowsum(gs * d_t1 * sig_b)
            gt[:, 1] = _rowsum(gs * d_t2 * sig_b)
            gt[:, 2] = _rowsum(gs * np.where(in1, u, t1))
            gt[:, 3] = _rowsum(gs * np.where(in3, t2 - t1, np.where(only2, u - t1, 0.0)))
            gt[:, 4] = _rowsum(gs * np.where(in3, u - t2, 0.0))
            theta._accum(gt)

    def bw_slope(g):
        if theta.requires_grad:
            gt = np.zeros_like(th)
            gt[:, 2] = _rowsum(g * in1)
            gt[:, 3] = _rowsum(g * only2)
            gt[:, 4] = _rowsum(g * in3)
            theta._accum(gt)

    out = Tensor._make(sgn * f, (v, chi, theta), bw_out)
    deriv = Tensor._make(slope, (theta,), bw_slope)
    return out, deriv


def _rowsum(x):
    return x.sum(axis=0) if x.ndim == 2 else x
