"""Minimal dense-tensor reverse-mode autodiff.

Tensors wrap numpy arrays; each op returns a new Tensor carrying a
closure that accumulates gradients into its parents. The graph is only
recorded when some input requires gradients, so frozen-parameter
inference pays no bookkeeping cost. Convolutions route through the
kernels package (compiled or reference backend).
"""
from __future__ import annotations

import numpy as np

from . import ShapeError
from . import kernels


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, " \
               f"requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar output")
            grad = np.ones_like(self.data)
        # iterative topological order over the grad-requiring subgraph
        order, seen, stack = [], set(), [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _node(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents),
                  _backward=backward)


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to the original shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data + b.data

    def backward(gy):
        _accum(a, _unbroadcast(gy, a.data.shape))
        _accum(b, _unbroadcast(gy, b.data.shape))
    return _node(out_data, (a, b), backward)


def sub(a, b):
    return add(a, mul(b, -1.0))


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data * b.data

    def backward(gy):
        _accum(a, _unbroadcast(gy * b.data, a.data.shape))
        _accum(b, _unbroadcast(gy * a.data, b.data.shape))
    return _node(out_data, (a, b), backward)


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data / b.data

    def backward(gy):
        _accum(a, _unbroadcast(gy / b.data, a.data.shape))
        _accum(b, _unbroadcast(-gy * a.data / (b.data ** 2), b.data.shape))
    return _node(out_data, (a, b), backward)


def pow_const(x: Tensor, p: float):
    out_data = x.data ** p

    def backward(gy):
        _accum(x, gy * p * x.data ** (p - 1.0))
    return _node(out_data, (x,), backward)


def exp(x: Tensor):
    out_data = np.exp(x.data)

    def backward(gy):
        _accum(x, gy * out_data)
    return _node(out_data, (x,), backward)


def log(x: Tensor):
    out_data = np.log(x.data)

    def backward(gy):
        _accum(x, gy / x.data)
    return _node(out_data, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float):
    out_data = np.clip(x.data, lo, hi)

    def backward(gy):
        _accum(x, gy * ((x.data > lo) & (x.data < hi)))
    return _node(out_data, (x,), backward)


def tsum(x: Tensor, axis=None, keepdims=False):
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(gy):
        g = np.asarray(gy)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))
    return _node(out_data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims=False):
    count = x.data.size if axis is None else \
        np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x: Tensor, shape):
    out_data = x.data.reshape(shape)

    def backward(gy):
        _accum(x, np.asarray(gy).reshape(x.data.shape))
    return _node(out_data, (x,), backward)


def concat(tensors, axis=1):
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(gy):
        for t, g in zip(tensors, np.split(gy, splits, axis=axis)):
            _accum(t, g)
    return _node(out_data, tuple(tensors), backward)


def relu(x: Tensor):
    return leaky_relu(x, 0.0)


def leaky_relu(x: Tensor, slope: float = 0.01):
    pos = x.data >= 0
    out_data = np.where(pos, x.data, slope * x.data)

    def backward(gy):
        _accum(x, gy * np.where(pos, 1.0, slope))
    return _node(out_data, (x,), backward)


def sigmoid(x: Tensor):
    xd = x.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(gy):
        _accum(x, gy * out_data * (1.0 - out_data))
    return _node(out_data, (x,), backward)


def softmax(x: Tensor, axis=1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(gy):
        dot = (gy * out_data).sum(axis=axis, keepdims=True)
        _accum(x, out_data * (gy - dot))
    return _node(out_data, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor = None):
    """x [N, F] @ w [F, O] + b [O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear expects [N,F]@[F,O], got {x.data.shape} "
                         f"and {w.data.shape}")
    out_data = x.data @ w.data
    if b is not None:
        out_data = out_data + b.data

    def backward(gy):
        _accum(x, gy @ w.data.T)
        _accum(w, x.data.T @ gy)
        if b is not None:
            _accum(b, gy.sum(axis=0))
    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward)


def global_avg_pool(x: Tensor):
    """[N, C, D, H, W] -> [N, C]."""
    if x.data.ndim != 5:
        raise ShapeError(f"global_avg_pool expects 5D input, got {x.data.shape}")
    n, c, d, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3, 4))
    scale = 1.0 / (d * h * w)

    def backward(gy):
        _accum(x, np.broadcast_to(gy[:, :, None, None, None] * scale,
                                  x.data.shape))
    return _node(out_data, (x,), backward)


# channel-last position of each pooled 2x2x2 block after this transpose
_POOL_PERM = (0, 1, 2, 4, 6, 3, 5, 7)
_POOL_INV = (0, 1, 2, 5, 3, 6, 4, 7)


def max_pool2(x: Tensor):
    """2x2x2 max pooling with stride 2; spatial dims must be even."""
    n, c, d, h, w = x.data.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {x.data.shape}")
    blocks = x.data.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    blocks = blocks.transpose(_POOL_PERM).reshape(n, c, d // 2, h // 2, w // 2, 8)
    idx = blocks.argmax(axis=-1)
    out_data = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(gy):
        g8 = np.zeros(blocks.shape, dtype=gy.dtype)
        np.put_along_axis(g8, idx[..., None], gy[..., None], axis=-1)
        g = g8.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
        g = g.transpose(_POOL_INV).reshape(n, c, d, h, w)
        _accum(x, g)
    return _node(out_data, (x,), backward)


def dropout(x: Tensor, rate: float, train: bool, rng=None):
    """Inverted dropout: identity at eval, survivors scaled by 1/(1-rate)."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode requires an rng")
    keep = (rng.random(x.data.shape) >= rate)
    scale = 1.0 / (1.0 - rate)
    mask = keep.astype(x.data.dtype) * scale
    out_data = x.data * mask

    def backward(gy):
        _accum(x, gy * mask)
    return _node(out_data, (x,), backward)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalize over (D, H, W) per sample per channel; gamma/beta are [C]."""
    if x.data.ndim != 5:
        raise ShapeError(f"instance_norm expects 5D input, got {x.data.shape}")
    n, c = x.data.shape[:2]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"instance_norm scale/shift must be [{c}], got "
                         f"{gamma.data.shape} and {beta.data.shape}")
    axes = (2, 3, 4)
    m = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - m) * inv
    gview = gamma.data[None, :, None, None, None]
    out_data = xhat * gview + beta.data[None, :, None, None, None]

    def backward(gy):
        gxhat = gy * gview
        mean_g = gxhat.mean(axis=axes, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=axes, keepdims=True)
        _accum(x, inv * (gxhat - mean_g - xhat * mean_gx))
        _accum(gamma, (gy * xhat).sum(axis=(0, 2, 3, 4)))
        _accum(beta, gy.sum(axis=(0, 2, 3, 4)))
    return _node(out_data, (x, gamma, beta), backward)


def conv3d(x: Tensor, w: Tensor, b: Tensor = None, stride: int = 1,
           padding: int = 0, name: str = ""):
    """Cross-correlation of x [N,Ci,D,H,W] with w [Co,Ci,kd,kh,kw]."""
    tag = f" in {name}" if name else ""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5D input and weight{tag}, got "
                         f"{x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv3d channel mismatch{tag}: input has "
                         f"{x.data.shape[1]}, weight expects {w.data.shape[1]}")
    if b is not None and b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"conv3d bias must be [{w.data.shape[0]}]{tag}, "
                         f"got {b.data.shape}")
    out_data = kernels.conv3d_forward(x.data, w.data, stride, padding)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None, None]

    def backward(gy):
        gy = np.ascontiguousarray(gy)
        if x.requires_grad:
            _accum(x, kernels.conv3d_grad_input(gy, w.data, x.data.shape,
                                                stride, padding))
        if w.requires_grad:
            _accum(w, kernels.conv3d_grad_weight(gy, x.data, w.data.shape,
                                                 stride, padding))
        if b is not None:
            _accum(b, gy.sum(axis=(0, 2, 3, 4)))
    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward)


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor = None, stride: int = 2,
                     name: str = ""):
    """Transposed convolution; w is [Cin, Cout, kd, kh, kw], no padding.

    Output spatial dim = (in - 1) * stride + k. Implemented as the adjoint
    of the strided forward convolution, so the same three kernel
    primitives serve both directions.
    """
    tag = f" in {name}" if name else ""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv_transpose3d expects 5D input and weight{tag}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"conv_transpose3d channel mismatch{tag}: input has "
                         f"{x.data.shape[1]}, weight expects {w.data.shape[0]}")
    if b is not None and b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"conv_transpose3d bias must be [{w.data.shape[1]}]{tag}")
    n = x.data.shape[0]
    cout = w.data.shape[1]
    k = w.data.shape[2:]
    big = tuple((x.data.shape[2 + i] - 1) * stride + k[i] for i in range(3))
    out_shape = (n, cout) + big
    out_data = kernels.conv3d_grad_input(x.data, w.data, out_shape, stride, 0)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None, None]

    def backward(gy):
        gy = np.ascontiguousarray(gy)
        if x.requires_grad:
            _accum(x, kernels.conv3d_forward(gy, w.data, stride, 0))
        if w.requires_grad:
            _accum(w, kernels.conv3d_grad_weight(x.data, gy, w.data.shape,
                                                 stride, 0))
        if b is not None:
            _accum(b, gy.sum(axis=(0, 2, 3, 4)))
    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward)
