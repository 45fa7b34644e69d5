"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation records a closure computing the vector-Jacobian product
for its inputs; :meth:`Tensor.backward` walks the recorded graph in
reverse topological order. The op set is deliberately closed: it holds
exactly what the super-resolution network and its loss need.

Values are 32-bit by default. Gradient checking switches to 64-bit with
the :func:`precision` context manager.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np
from scipy import special

from .errors import ConfigError, ContractError, DimensionError

__all__ = [
    "Tensor", "precision", "no_grad", "get_dtype", "as_tensor",
    "add", "sub", "mul", "div", "neg", "abs", "sum", "mean",
    "reshape", "transpose", "concat", "matmul", "linear", "conv2d",
    "layer_norm", "softmax", "gelu", "leaky_relu", "pixel_shuffle",
    "pixel_unshuffle", "multi_head_attention",
]


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True


_state = _State()


def get_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype newly created tensors are cast to."""
    previous = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad():
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """An n-d array that can take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_state.dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"tensor of shape {self.shape} is not a scalar")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def abs(self):
        return abs(self)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Only scalar tensors can be differentiated. Calling twice without
        zeroing accumulates.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise arithmetic with numpy broadcasting

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(-g * out / b.data, b.shape)
        return _unbroadcast(g / b.data, a.shape), gb

    return _result(out, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def abs(a):
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


# reductions and shape manipulation

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward, "mean")


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), backward, "concat")


def _getitem(a, index):
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward, "getitem")


# linear algebra

def matmul(a, b):
    """Batched matrix product over the last two axes (both operands >= 2-d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, w, b=None):
    """``x @ w.T + b`` over the last axis of ``x``; ``w`` is (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    n_out, n_in = w.shape

    def backward(g):
        g2 = g.reshape(-1, n_out)
        gx = (g @ w.data) if x.requires_grad else None
        gw = (g2.T @ x.data.reshape(-1, n_in)) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "linear")


def _im2col(xp, kh, kw, out_h, out_w):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + out_h, j:j + out_w]
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def conv2d(x, w, b=None, padding=0):
    """Stride-1 2-d cross-correlation with zero padding.

    ``x`` is (C_in, H, W) or (B, C_in, H, W); ``w`` is (C_out, C_in, kh, kw).
    """
    x, w = as_tensor(x), as_tensor(w)
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks for input {x.shape} and weight {w.shape}")
    xd = x.data[None] if unbatched else x.data
    n, c_in, h, wd = xd.shape
    c_out, wc, kh, kw = w.shape
    if wc != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, weight expects {wc}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise DimensionError(f"conv2d: bias {b.shape} does not match {c_out} outputs")
    p = padding
    out_h, out_w = h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = _im2col(xp, kh, kw, out_h, out_w)
    w2 = w.data.reshape(c_out, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, c_out, out_h, out_w)

    def backward(g):
        g2 = g.reshape(n, c_out, out_h * out_w)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, c_in, kh, kw, out_h, out_w)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + out_h, j:j + out_w] += gcols[:, :, i, j]
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
            if unbatched:
                gx = gx[0]
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out[0] if unbatched else out, parents, backward, "conv2d")


# normalization and activations

def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis with the biased variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine params must be ({d},)")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def softmax(x, axis=-1):
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _result((x.data * cdf).astype(x.data.dtype, copy=False), (x,), backward, "gelu")


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must be in (0, 1), got {slope}")
    positive = x.data >= 0
    scale = np.where(positive, 1.0, slope).astype(x.data.dtype)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def _shuffle(data, r):
    *lead, c, h, w = data.shape
    out = data.reshape(*lead, c // (r * r), r, r, h, w)
    k = len(lead)
    out = out.transpose(*range(k), k, k + 3, k + 1, k + 4, k + 2)
    return out.reshape(*lead, c // (r * r), h * r, w * r)


def _unshuffle(data, r):
    *lead, c, h, w = data.shape
    out = data.reshape(*lead, c, h // r, r, w // r, r)
    k = len(lead)
    out = out.transpose(*range(k), k, k + 2, k + 4, k + 1, k + 3)
    return out.reshape(*lead, c * r * r, h // r, w // r)


def pixel_shuffle(x, r):
    """(.., C*r*r, H, W) -> (.., C, H*r, W*r) with out[c, h*r+i, w*r+j] = in[c*r*r+i*r+j, h, w]."""
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-3] % (r * r):
        raise DimensionError(f"pixel_shuffle: {x.shape[-3:]} channels not divisible by {r * r}")
    return _result(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),), "pixel_shuffle")


def pixel_unshuffle(x, r):
    """Inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-1] % r or x.shape[-2] % r:
        raise DimensionError(f"pixel_unshuffle: spatial size {x.shape[-2:]} not divisible by {r}")
    return _result(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),), "pixel_unshuffle")


def multi_head_attention(x, heads, qkv_weight, qkv_bias, proj_weight, proj_bias,
                         return_attention=False):
    """Self-attention with one fused QKV projection.

    ``x`` is (N, D) or (B, N, D). With ``return_attention`` the per-head
    attention matrices (B, heads, N, N) are returned alongside the output.
    """
    x = as_tensor(x)
    unbatched = x.ndim == 2
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    n_batch, n_tok, dim = x.shape
    if dim % heads:
        raise ConfigError(f"embedding dim {dim} not divisible by {heads} heads")
    head_dim = dim // heads
    qkv = linear(x, qkv_weight, qkv_bias)
    qkv = transpose(reshape(qkv, (n_batch, n_tok, 3, heads, head_dim)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
    attn = softmax(scores, axis=-1)
    mixed = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (n_batch, n_tok, dim))
    out = linear(mixed, proj_weight, proj_bias)
    if unbatched:
        out = reshape(out, (n_tok, dim))
    return (out, attn) if return_attention else out
