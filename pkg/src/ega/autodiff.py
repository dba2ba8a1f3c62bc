"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation records a :class:`Node` on the tensor it produces. Calling
:func:`backward` on a scalar walks the recorded nodes in reverse execution
order, accumulating gradients into every tensor with ``requires_grad``.
A graph can be differentiated once; its saved buffers are released
afterwards.

Tensors default to float32. Passing ``dtype=np.float64`` keeps a whole
computation in double precision, which is what the finite-difference
checks in the test-suite use.
"""

from __future__ import annotations

import itertools
import weakref
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ContractError,
    DegenerateBatchError,
    DimensionError,
    GraphConsumedError,
    LabelError,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_sequence = itertools.count()


class Node:
    """One executed operation: its inputs and how to push gradients back."""

    __slots__ = ("seq", "parents", "backward_fn", "out_grad", "consumed", "output", "__weakref__")

    def __init__(self, parents, backward_fn):
        self.seq = next(_sequence)
        self.parents = parents
        self.backward_fn = backward_fn
        self.out_grad = None
        self.consumed = False
        self.output = None


class Tensor:
    """An n-dimensional array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op, recording a node if needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._node = None
    if out.requires_grad:
        node = Node(tuple(parents), backward_fn)
        node.output = weakref.ref(out)
        out._node = node
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t``."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    root = loss._node
    if root is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if root.consumed:
        raise GraphConsumedError("graph already differentiated; re-run the forward pass")

    nodes = []
    seen = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        if node.consumed:
            raise GraphConsumedError("graph shares nodes with an already differentiated graph")
        seen.add(id(node))
        nodes.append(node)
        for p in node.parents:
            if p._node is not None:
                stack.append(p._node)
    nodes.sort(key=lambda n: n.seq, reverse=True)

    root.out_grad = seed
    for node in nodes:
        g = node.out_grad
        out = node.output()
        if out is not None:
            out.grad = g if out.grad is None else out.grad + g
        if g is not None:
            grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is not None:
                    pn = parent._node
                    pn.out_grad = pg if pn.out_grad is None else pn.out_grad + pg
                else:
                    parent.grad = pg if parent.grad is None else parent.grad + pg
        node.consumed = True
        node.out_grad = None
        node.backward_fn = None


# -- elementwise arithmetic ----------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), grad_fn)


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient flows only where the value was inside."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)

    def grad_fn(g):
        if axis is not None:
            axes = (axis,) if isinstance(axis, int) else axis
            g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), grad_fn)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_rows(x: Tensor, index) -> Tensor:
    """Select rows ``x[index]`` along the first axis (indices may repeat)."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), grad_fn)


# -- network layers ------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (out > 0),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


_TO_NHWC = (0, 2, 3, 1)
_TO_NCHW = (0, 3, 1, 2)


def _channel_axis(layout: str) -> int:
    if layout == "NCHW":
        return 1
    if layout == "NHWC":
        return 3
    raise ValueError(f"unknown layout {layout!r}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0,
           layout: str = "NCHW") -> Tensor:
    """2-D cross-correlation with a KCRS kernel.

    ``layout`` names the layout of both input and output. The kernel works
    on NHWC, where the im2col product is already in output order; NCHW
    input is transposed around it.
    """
    cax = _channel_axis(layout)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[cax] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} ({layout}) incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} incompatible with weight {weight.shape}")
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    if layout == "NCHW":
        out = _conv2d_nhwc(transpose(x, _TO_NHWC), weight, bias, stride, pad)
        return transpose(out, _TO_NCHW)
    return _conv2d_nhwc(x, weight, bias, stride, pad)


def _conv2d_nhwc(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, pad: int) -> Tensor:
    N, H, W, C = x.shape
    K, _, R, S = weight.shape
    Ho = (H + 2 * pad - R) // stride + 1
    Wo = (W + 2 * pad - S) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    win = sliding_window_view(xp, (R, S), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, R * S * C)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(K, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(N, Ho, Wo, K)
    keep_cols = cols if weight.requires_grad else None
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.reshape(-1, K)
        gx = gw = None
        if x.requires_grad:
            # one small matmul per kernel offset beats scattering a full column matrix
            wk = wmat.reshape(K, R, S, C)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for r in range(R):
                for s in range(S):
                    dxp[:, r:r + stride * Ho:stride, s:s + stride * Wo:stride, :] += (
                        (g2 @ wk[:, r, s, :]).reshape(N, Ho, Wo, C))
            gx = dxp[:, pad:pad + H, pad:pad + W, :] if pad else dxp
        if weight.requires_grad:
            gw = np.ascontiguousarray((g2.T @ keep_cols).reshape(K, R, S, C).transpose(0, 3, 1, 2))
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, grad_fn)


def _channel_sum(a: np.ndarray, cax: int, b: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-channel sum of ``a`` (or of ``a * b``) over every other axis."""
    if cax == a.ndim - 1:
        a2 = a.reshape(-1, a.shape[-1])
        if b is None:
            return a2.sum(axis=0)
        return np.einsum("ij,ij->j", a2, b.reshape(a2.shape))
    axes = tuple(i for i in range(a.ndim) if i != cax)
    return (a if b is None else a * b).sum(axis=axes)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, update_stats: bool = True, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS, layout: str = "NCHW") -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and, when
    ``update_stats`` is set, ``running_mean``/``running_var`` are updated
    in place by exponential moving average (unbiased variance, as is
    conventional). Evaluation mode reads the running statistics only.
    """
    cax = _channel_axis(layout)
    if x.ndim != 4 or gamma.shape != (x.shape[cax],) or beta.shape != (x.shape[cax],):
        raise DimensionError(f"batch_norm: input {x.shape} incompatible with affine {gamma.shape}/{beta.shape}")
    bshape = [1, 1, 1, 1]
    bshape[cax] = x.shape[cax]
    N = x.shape[0]
    m = x.size // x.shape[cax]
    xd = x.data
    if training:
        if N < 2:
            raise DegenerateBatchError("batch_norm in train mode needs a batch of at least 2")
        mu = _channel_sum(xd, cax) / m
        centered = xd - mu.reshape(bshape)
        var = _channel_sum(centered, cax, centered) / m
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(bshape)
    xhat = ((xd - mu.astype(xd.dtype).reshape(bshape)) * inv_std).astype(xd.dtype, copy=False)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def grad_fn(g):
        ggamma = _channel_sum(g, cax, xhat)
        gbeta = _channel_sum(g, cax)
        gx = None
        if x.requires_grad:
            scale = gamma.data.reshape(bshape) * inv_std
            if training:
                # the two batch-statistic corrections reuse the affine gradients
                gx = scale * (g - (gbeta / m).reshape(bshape) - xhat * (ggamma / m).reshape(bshape))
            else:
                gx = g * scale
        return gx, (ggamma if gamma.requires_grad else None), (gbeta if beta.requires_grad else None)

    return _make(out, (x, gamma, beta), grad_fn)


def _pool_windows(a: np.ndarray, layout: str):
    """The four members of each 2x2 window, in row-major window order."""
    if layout == "NCHW":
        N, C, H, W = a.shape
        v = a.reshape(N, C, H // 2, 2, W // 2, 2)
        return v, [(v, (slice(None), slice(None), slice(None), i, slice(None), j)) for i in (0, 1) for j in (0, 1)]
    N, H, W, C = a.shape
    v = a.reshape(N, H // 2, 2, W // 2, 2, C)
    return v, [(v, (slice(None), slice(None), i, slice(None), j, slice(None))) for i in (0, 1) for j in (0, 1)]


def max_pool2(x: Tensor, layout: str = "NCHW") -> Tensor:
    """2x2 non-overlapping max pool; ties route to the first element in row-major order."""
    _channel_axis(layout)
    hax = 2 if layout == "NCHW" else 1
    if x.ndim != 4 or x.shape[hax] % 2 or x.shape[hax + 1] % 2:
        raise DimensionError(f"max_pool2 needs even spatial dims, got {x.shape} ({layout})")
    _, views = _pool_windows(x.data, layout)
    a, b, c, d = (v[idx] for v, idx in views)
    out = np.maximum(np.maximum(a, b), np.maximum(c, d))

    def grad_fn(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        gv, gviews = _pool_windows(gx, layout)
        taken = np.zeros(out.shape, dtype=bool)
        for (v, idx), (_, gidx) in zip(views, gviews):
            hit = (v[idx] == out) & ~taken
            gv[gidx] = g * hit
            taken |= hit
        return (gx,)

    return _make(out, (x,), grad_fn)


def global_avg_pool(x: Tensor, layout: str = "NCHW") -> Tensor:
    """Spatial mean of each feature map: NCHW (or NHWC) -> NC."""
    cax = _channel_axis(layout)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool needs a 4-D input, got {x.shape}")
    axes = (2, 3) if cax == 1 else (1, 2)
    hw = x.shape[axes[0]] * x.shape[axes[1]]
    return _make(x.data.mean(axis=axes), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g / hw, axes), x.shape).copy(),))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape N x K and weight C x K."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make(out, parents, grad_fn)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    C = logits.shape[1]
    if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= C):
        raise LabelError(f"labels must be integers in [0, {C}), got {labels.tolist()}")
    N = logits.shape[0]
    logp = log_softmax(logits.data)
    rows = np.arange(N)
    loss = -logp[rows, labels].mean()

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / N),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn)
