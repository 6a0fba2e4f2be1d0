"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray and records parents plus a backward closure as
ops execute; calling backward() on a scalar walks the graph in reverse
topological order and accumulates gradients into .grad. Float32 is the
working dtype; building the same graph from float64 leaves gives a
float64 graph, which is what the finite-difference checks use.

Fused ops (masked_softmax, rms_norm, rotary, cross-entropy) carry
closed-form backwards so the hot path stays at a handful of numpy calls.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # ---- graph bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad and self._backward is None:
            return  # constant leaf: nobody will read this gradient
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        # iterative topo sort; recursion depth would blow up on deep graphs
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents and not node.requires_grad:
                node.grad = None  # interior nodes: free as we go

    # ---- helpers -----------------------------------------------------------

    @staticmethod
    def _lift(x, dtype) -> "Tensor":
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=dtype))

    def _make(self, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = False
        if any(p.requires_grad or p._parents or p._backward for p in parents):
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # ---- arithmetic --------------------------------------------------------

    def __add__(self, other):
        o = Tensor._lift(other, self.dtype)

        def bwd(g):
            self._accumulate(_unbroadcast(g, self.shape))
            o._accumulate(_unbroadcast(g, o.shape))

        return self._make(self.data + o.data, (self, o), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accumulate(-g)

        return self._make(-self.data, (self,), bwd)

    def __sub__(self, other):
        o = Tensor._lift(other, self.dtype)

        def bwd(g):
            self._accumulate(_unbroadcast(g, self.shape))
            o._accumulate(_unbroadcast(-g, o.shape))

        return self._make(self.data - o.data, (self, o), bwd)

    def __rsub__(self, other):
        return Tensor._lift(other, self.dtype) - self

    def __mul__(self, other):
        o = Tensor._lift(other, self.dtype)

        def bwd(g):
            self._accumulate(_unbroadcast(g * o.data, self.shape))
            o._accumulate(_unbroadcast(g * self.data, o.shape))

        return self._make(self.data * o.data, (self, o), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = Tensor._lift(other, self.dtype)

        def bwd(g):
            self._accumulate(_unbroadcast(g / o.data, self.shape))
            o._accumulate(_unbroadcast(-g * self.data / (o.data * o.data), o.shape))

        return self._make(self.data / o.data, (self, o), bwd)

    def __rtruediv__(self, other):
        return Tensor._lift(other, self.dtype) / self

    def __matmul__(self, other):
        o = Tensor._lift(other, self.dtype)
        if self.data.ndim < 2 or o.data.ndim < 2:
            raise ShapeError("matmul operands must be at least 2-D")

        def bwd(g):
            self._accumulate(_unbroadcast(g @ o.data.swapaxes(-1, -2), self.shape))
            o._accumulate(_unbroadcast(self.data.swapaxes(-1, -2) @ g, o.shape))

        return self._make(self.data @ o.data, (self, o), bwd)

    # ---- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape

        def bwd(g):
            self._accumulate(g.reshape(old))

        return self._make(self.data.reshape(shape), (self,), bwd)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))

        def bwd(g):
            self._accumulate(g.transpose(inv))

        return self._make(self.data.transpose(axes), (self,), bwd)

    def __getitem__(self, key):
        def bwd(g):
            full = np.zeros_like(self.data)
            full[key] += g
            self._accumulate(full)

        return self._make(self.data[key], (self,), bwd)

    # ---- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        def bwd(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape).copy())
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accumulate(np.broadcast_to(gg, self.shape).copy())

        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ---- elementwise nonlinear ---------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bwd(g):
            self._accumulate(g * out_data)

        return self._make(out_data, (self,), bwd)

    def log(self):
        def bwd(g):
            self._accumulate(g / self.data)

        return self._make(np.log(self.data), (self,), bwd)

    def swish(self):
        # x * sigmoid(x); backward uses s(1 + x(1 - s))
        s = 1.0 / (1.0 + np.exp(-self.data))

        def bwd(g):
            self._accumulate(g * s * (1.0 + self.data * (1.0 - s)))

        return self._make(self.data * s, (self,), bwd)


def stop_gradient(x: Tensor) -> Tensor:
    """Detach: same values, no parents."""
    return Tensor(x.data.copy() if isinstance(x, Tensor) else np.asarray(x))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    dtype = tensors[0].dtype
    tensors = [t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=dtype)) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    ref = tensors[0]
    return ref._make(out_data, tuple(tensors), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather with scatter-add backward."""
    ids = np.asarray(ids)

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table._accumulate(full)

    return table._make(table.data[ids], (table,), bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """y = gain * x / sqrt(mean(x^2, -1) + eps), normalizing the last axis."""
    d = x.data.shape[-1]
    r = np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xn = x.data / r

    def bwd(g):
        t = g * gain.data
        x._accumulate(t / r - x.data * np.sum(t * x.data, axis=-1, keepdims=True) / (d * r**3))
        gain._accumulate((g * xn).reshape(-1, d).sum(axis=0))

    return x._make(xn * gain.data, (x, gain), bwd)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate (even, odd) channel pairs of x[..., L, dh] by per-position angles.

    cos/sin have shape (L, dh//2); the backward is the inverse rotation.
    """
    even, odd = x.data[..., 0::2], x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = even * cos - odd * sin
    out_data[..., 1::2] = even * sin + odd * cos

    def bwd(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        x._accumulate(gx)

    return x._make(out_data, (x,), bwd)


def masked_softmax(scores: Tensor, allow: np.ndarray) -> Tensor:
    """Softmax over the last axis with hard masking.

    Disallowed entries are set to -inf before the max-subtracted softmax,
    so their probability and their gradient are exactly zero. Every row
    must have at least one allowed entry.
    """
    neg_inf = np.asarray(-np.inf, dtype=scores.dtype)
    masked = np.where(allow, scores.data, neg_inf)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        scores._accumulate(p * (g - dot))

    return scores._make(p, (scores,), bwd)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-position negative log-likelihood; output drops the class axis."""
    targets = np.asarray(targets)
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    ez = np.exp(z)
    sez = ez.sum(axis=-1, keepdims=True)
    lse = np.log(sez)
    idx = np.indices(targets.shape, sparse=True)
    nll = (lse.squeeze(-1) + m.squeeze(-1)) - logits.data[(*idx, targets)]

    def bwd(g):
        p = ez / sez
        p[(*idx, targets)] -= 1.0
        logits._accumulate(p * g[..., None])

    return logits._make(nll, (logits,), bwd)
