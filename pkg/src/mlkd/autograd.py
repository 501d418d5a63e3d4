"""A small tape-based reverse-mode autodiff engine over numpy arrays.

Only the operations the encoder and the distillation losses need are
provided. Fused kernels (softmax, log-softmax, layer norm, GELU) carry
hand-written adjoints instead of being composed from primitives.
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # -- graph plumbing

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate ``d self / d leaf`` into every reachable tensor's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- shape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    # -- arithmetic

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else _const(other, self)

        def bw(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: self._accum(-g))

    def __sub__(self, other):
        return self + (-(other if isinstance(other, Tensor) else _const(other, self)))

    def __rsub__(self, other):
        return _const(other, self) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else _const(other, self)

        def bw(g):
            self._accum(_unbroadcast(g * other.data, self.shape))
            other._accum(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other.pow(-1.0)
        return self * (1.0 / other)

    def pow(self, exponent: float):
        x = self.data
        out = x ** exponent
        return Tensor._make(out, (self,), lambda g: self._accum(g * exponent * x ** (exponent - 1)))

    __pow__ = pow

    def __matmul__(self, other):
        a, b = self.data, other.data
        # (..., k) @ (k, m) as one 2-D BLAS call; numpy's batched path is much slower
        flat = b.ndim == 2 and a.ndim > 2

        def bw(g):
            if self.requires_grad:
                if flat:
                    ga = (g.reshape(-1, g.shape[-1]) @ b.T).reshape(a.shape)
                else:
                    ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
                self._accum(ga)
            if other.requires_grad:
                if b.ndim == 2:
                    gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
                other._accum(gb)

        out = (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1]) if flat else a @ b
        return Tensor._make(out, (self, other), bw)

    # -- reductions and reshapes

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, shape))

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: self._accum(g.reshape(old)))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: self._accum(g.transpose(inv)))

    def __getitem__(self, index):
        shape, dtype = self.shape, self.data.dtype

        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            self._accum(full)

        return Tensor._make(self.data[index], (self,), bw)

    # -- elementwise

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: self._accum(g * out))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: self._accum(g / x))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: self._accum(g * 0.5 / out))

    def abs(self):
        x = self.data
        return Tensor._make(np.abs(x), (self,), lambda g: self._accum(g * np.sign(x)))

    def relu(self):
        x = self.data
        return Tensor._make(np.maximum(x, 0), (self,), lambda g: self._accum(g * (x > 0)))


def _const(value, like: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or np.float64))


# ---------------------------------------------------------------- fused kernels

def softmax(x: Tensor, axis=-1, mask=None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is false get exactly 0."""
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return Tensor._make(p, (x,), bw)


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        x._accum(g - p * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps=1e-12) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gain._accum(_unbroadcast(g * xhat, gain.shape))
        bias._accum(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            x._accum(inv / d * (d * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True)))

    return Tensor._make(out, (x, gain, bias), bw)


_GELU_C = float(np.sqrt(2.0 / np.pi))  # a python float keeps float32 inputs float32


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, which keeps gradient checks clean)."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        x._accum(g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner))

    return Tensor._make(out, (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    shape, dtype = table.shape, table.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        table._accum(full)

    return Tensor._make(table.data[ids], (table,), bw)


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        a._accum(_unbroadcast(np.where(cond, g, 0), a.shape))
        b._accum(_unbroadcast(np.where(cond, 0, g), b.shape))

    return Tensor._make(np.where(cond, a.data, b.data), (a, b), bw)
