"""Dense-tensor numeric core with reverse-mode automatic differentiation.

Tensors wrap numpy arrays and record a computation graph on the fly.
Calling ``backward()`` on a scalar walks the graph in reverse topological
order and accumulates gradients additively into every ``requires_grad``
leaf.  All op outputs are checked for NaN/Inf; non-finite values raise
immediately rather than propagating.
"""

from __future__ import annotations

import contextlib
import math
from typing import Optional, Sequence

import numpy as np

_grad_enabled = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
LOG_EPS = 1e-12


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if self.requires_grad else None)
        self._parents: tuple = ()
        self._backward_fn = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph ---------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode gradient of this scalar w.r.t. every graph leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen = set()

        def visit(t: Tensor):
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    topo.append(node)
                    continue
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for p in node._parents:
                    if p.requires_grad:
                        stack.append((p, False))

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        for node in topo:
            if node.grad is not None:
                _check_finite(node.grad, "backward")

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


# -- elementwise / broadcast ops ----------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), bwd, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise ValueError("matmul requires at least 2-D operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum_grad(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), bwd, "matmul")


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.exp(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accum_grad(g * data)

    return _make(data, (x,), bwd, "exp")


def log(x: Tensor) -> Tensor:
    """Natural log with inputs clamped at LOG_EPS for numerical safety."""
    x = _as_tensor(x)
    clamped = np.maximum(x.data, LOG_EPS)
    data = np.log(clamped)

    def bwd(g):
        if x.requires_grad:
            x._accum_grad(g / clamped)

    return _make(data, (x,), bwd, "log")


def power(x: Tensor, p: float) -> Tensor:
    x = _as_tensor(x)
    data = np.power(x.data, p)

    def bwd(g):
        if x.requires_grad:
            x._accum_grad(g * p * np.power(x.data, p - 1.0))

    return _make(data, (x,), bwd, "power")


def sqrt(x: Tensor) -> Tensor:
    return power(x, 0.5)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def bwd(g):
        if x.requires_grad:
            x._accum_grad(g * (x.data > 0.0))

    return _make(data, (x,), bwd, "relu")


def gelu(x: Tensor) -> Tensor:
    """GeLU, tanh approximation: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    x = _as_tensor(x)
    inner = _GELU_C * (x.data + _GELU_A * x.data ** 3)
    t = np.tanh(inner)
    data = 0.5 * x.data * (1.0 + t)

    def bwd(g):
        if x.requires_grad:
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data ** 2)
            dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * dinner
            x._accum_grad(g * dx)

    return _make(data, (x,), bwd, "gelu")


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.tanh(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accum_grad(g * (1.0 - data * data))

    return _make(data, (x,), bwd, "tanh")


# -- reductions ----------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if x.requires_grad:
            if axis is None:
                x._accum_grad(np.broadcast_to(g, x.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                x._accum_grad(np.broadcast_to(gg, x.shape).copy())

    return _make(np.asarray(data), (x,), bwd, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape ops -------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            x._accum_grad(g.reshape(x.shape))

    return _make(data, (x,), bwd, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _as_tensor(x)
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        if x.requires_grad:
            x._accum_grad(np.transpose(g, inv))

    return _make(data, (x,), bwd, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum_grad(g[tuple(idx)])

    return _make(data, tuple(tensors), bwd, "concat")


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows (axis 0) by integer index; backward scatter-adds."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError("gather_rows index out of range")
    data = x.data[idx]

    def bwd(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            np.add.at(acc, idx, g)
            x._accum_grad(acc)

    return _make(data, (x,), bwd, "gather_rows")


def pad_rows(x: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad along axis 0."""
    x = _as_tensor(x)
    widths = [(before, after)] + [(0, 0)] * (x.data.ndim - 1)
    data = np.pad(x.data, widths)
    n = x.shape[0]

    def bwd(g):
        if x.requires_grad:
            x._accum_grad(g[before:before + n])

    return _make(data, (x,), bwd, "pad_rows")


# -- normalisation ---------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max subtraction)."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            x._accum_grad(data * (g - dot))

    return _make(data, (x,), bwd, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data
    d = x.shape[-1]

    def bwd(g):
        if gain.requires_grad:
            gain._accum_grad(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accum_grad(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x._accum_grad(inv * (gy - m1 - xhat * m2))

    _ = d
    return _make(data, (x, gain, bias), bwd, "layer_norm")


# -- convolution -------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           padding: int = 1) -> Tensor:
    """Cross-correlation of x[C_in,H,W] with kernel[C_out,C_in,kh,kw].

    Zero padding of `padding` on each spatial border; stride 1.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects x[C,H,W] and kernel[C_out,C_in,kh,kw]")
    c_in, h, w = x.shape
    c_out, c_in_k, kh, kw = kernel.shape
    if c_in != c_in_k:
        raise ValueError(f"conv2d channel mismatch: {c_in} vs {c_in_k}")
    ho = h + 2 * padding - kh + 1
    wo = w + 2 * padding - kw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d output would be empty")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    # im2col: (ho*wo, c_in*kh*kw)
    cols = np.empty((ho * wo, c_in * kh * kw))
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, di:di + ho, dj:dj + wo]  # (c_in, ho, wo)
            cols[:, (di * kw + dj)::kh * kw] = patch.reshape(c_in, -1).T
    wmat = kernel.data.transpose(1, 2, 3, 0).reshape(c_in * kh * kw, c_out)
    out = cols @ wmat  # (ho*wo, c_out)
    if bias is not None:
        out = out + bias.data
    data = out.T.reshape(c_out, ho, wo)

    def bwd(g):
        gmat = g.reshape(c_out, -1).T  # (ho*wo, c_out)
        if bias is not None and bias.requires_grad:
            bias._accum_grad(gmat.sum(axis=0))
        if kernel.requires_grad:
            gw = cols.T @ gmat  # (c_in*kh*kw, c_out)
            kernel._accum_grad(
                gw.reshape(c_in, kh, kw, c_out).transpose(3, 0, 1, 2))
        if x.requires_grad:
            gcols = gmat @ wmat.T  # (ho*wo, c_in*kh*kw)
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gpatch = gcols[:, (di * kw + dj)::kh * kw].T.reshape(c_in, ho, wo)
                    gxp[:, di:di + ho, dj:dj + wo] += gpatch
            if padding:
                gxp = gxp[:, padding:-padding, padding:-padding]
            x._accum_grad(gxp)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(data, parents, bwd, "conv2d")
