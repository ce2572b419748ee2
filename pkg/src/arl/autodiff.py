"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a ``Tensor`` wraps a numpy array, every
op records its parents plus a backward closure, and ``backward()`` walks
the recorded graph in reverse topological order. The graph for one loss is
the "tape"; it lives exactly as long as the tensors that reference it and
is released eagerly after the reverse pass.

Only float32 and float64 are supported. Ops never mix precisions: the
output dtype equals the input dtype, so a net built in f64 stays in f64
for gradient checking.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, StatsUninitializedError

_node_ids = itertools.count()

_FLOAT_DTYPES = (np.float32, np.float64)


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


class no_grad:
    """Context manager that suppresses graph recording (forward-only)."""

    def __enter__(self):
        self._prev = _grad_mode.enabled
        _grad_mode.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_mode.enabled = self._prev
        return False


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional real array with optional gradient tracking.

    ``data`` is treated as immutable once the tensor participates in a
    graph; only ``grad`` buffers and optimizer-owned leaves are written
    in place.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._backward = _backward

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() requires a scalar tensor, got shape {self.shape}")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.grad is not None})"

    # -- graph plumbing ------------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        # Always copy on first write: backward closures may hand the same
        # buffer to several parents, and later += must not alias them.
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        """Return a leaf sharing data but cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, free_graph: bool = True):
        """Reverse pass from a scalar loss; accumulates into leaf ``grad``.

        ``free_graph`` drops closures and intermediate grads afterwards so
        a tape lives for exactly one optimization step.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if free_graph and node._parents:
                node._backward = None
                node._parents = ()
                node.grad = None if node is not self else node.grad


def _track(data: np.ndarray, parents: Sequence[Tensor],
           backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, recording the graph only when it can matter."""
    if _grad_mode.enabled and any(p.requires_grad or p._parents for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def _coerce(other, dtype):
    if isinstance(other, Tensor):
        return other
    return np.asarray(other, dtype=dtype)


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    if isinstance(b, Tensor):
        out = a.data + b.data

        def bwd(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return _track(out, (a, b), bwd)

    out = a.data + b

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _track(out, (a,), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    if isinstance(b, Tensor):
        out = a.data * b.data

        def bwd(g):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
            b._accumulate(_unbroadcast(g * a.data, b.shape))

        return _track(out, (a, b), bwd)

    out = a.data * b

    def bwd(g):
        a._accumulate(_unbroadcast(g * b, a.shape))

    return _track(out, (a,), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(-g)

    return _track(-a.data, (a,), bwd)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -np.asarray(b, dtype=a.dtype))


def pow_const(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def bwd(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _track(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * out)

    return _track(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        a._accumulate(g / a.data)

    return _track(out, (a,), bwd)


# -- reductions and reshapes -------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))
            return
        gk = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gk, a.shape).astype(a.dtype, copy=True))

    return _track(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        a._accumulate(g.reshape(a.shape))

    return _track(out, (a,), bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _track(out, (a,), bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0; scatter-adds on the way back."""
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def bwd(g):
        buf = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(buf, idx, g)
        a._accumulate(buf)

    return _track(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat requires at least one input")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"concat axis {axis} out of range for {nd}-d inputs")
    ax = axis % nd
    ref = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=1):
        if t.ndim != nd:
            raise DimensionError(f"concat input {i} has ndim {t.ndim}, expected {nd}")
        for d in range(nd):
            if d != ax and t.shape[d] != ref[d]:
                raise DimensionError(
                    f"concat input {i} mismatches axis {d}: {t.shape[d]} vs {ref[d]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    offsets = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bwd(g):
        sl = [slice(None)] * nd
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl[ax] = slice(lo, hi)
            t._accumulate(g[tuple(sl)].copy())

    return _track(out, tuple(tensors), bwd)


# -- nonlinearities ----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        a._accumulate(g * (a.data > 0))

    return _track(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        a._accumulate(g * out * (1.0 - out))

    return _track(out, (a,), bwd)


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate(out * (g - dot))

    return _track(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"log_softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        a._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _track(out, (a,), bwd)


# -- layer ops ---------------------------------------------------------------


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x:(N,D), w:(D,O), b:(O,)."""
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(
            f"fully_connected expects 2-d x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"fully_connected: x features {x.shape[1]} != w rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise DimensionError(
            f"fully_connected: bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data + b.data

    def bwd(g):
        x._accumulate(g @ w.data.T)
        w._accumulate(x.data.T @ g)
        b._accumulate(g.sum(axis=0))

    return _track(out, (x, w, b), bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution, x:(N,C,H,W), w:(O,C,kh,kw), b:(O,).

    Implemented as im2col plus one matmul per batch; the column buffer is
    kept alive for the backward pass.
    """
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d: stride {stride} must be >=1 and pad {pad} >=0")
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d x and w, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(
            f"conv2d: input channel axis {c} != weight in-channel axis {ci}")
    if b.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({o},)")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for ki in range(kh):
        hi = ki + stride * oh
        for kj in range(kw):
            wj = kj + stride * ow
            cols[:, :, ki, kj] = xp[:, :, ki:hi:stride, kj:wj:stride]
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    w2 = w.data.reshape(o, c * kh * kw)
    out = np.matmul(w2, cols2) + b.data.reshape(1, o, 1)
    out = out.reshape(n, o, oh, ow)

    def bwd(g):
        g2 = g.reshape(n, o, oh * ow)
        b._accumulate(g2.sum(axis=(0, 2)))
        gw = np.einsum("nol,nkl->ok", g2, cols2, optimize=True)
        w._accumulate(gw.reshape(w.shape))
        gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, oh, ow)
        gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
        for ki in range(kh):
            hi = ki + stride * oh
            for kj in range(kw):
                wj = kj + stride * ow
                gxp[:, :, ki:hi:stride, kj:wj:stride] += gcols[:, :, ki, kj]
        x._accumulate(gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp)

    return _track(out, (x, w, b), bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 and floor semantics (odd edges dropped)."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2x2 expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    if oh < 1 or ow < 1:
        raise DimensionError(f"maxpool2x2: spatial dims {h}x{w} too small to pool")
    xc = x.data[:, :, :2 * oh, :2 * ow]
    windows = xc.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros((n, c, oh, ow, 4), dtype=x.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros((n, c, h, w), dtype=x.dtype)
        gx[:, :, :2 * oh, :2 * ow] = (
            gw.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow))
        x._accumulate(gx)

    return _track(out, (x,), bwd)


@dataclass
class BatchNormState:
    """Running statistics owned by one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                 train: bool, momentum: float = 0.1, eps: float = 1e-5,
                 update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by batch statistics; the first update copies them
    into the running buffers, later ones blend with ``momentum``. Eval mode
    requires initialized running stats and never touches them.
    ``update_stats=False`` makes train-mode forwards side-effect free, which
    finite-difference probes rely on.
    """
    if eps <= 0:
        raise ContractError(f"batch_norm2d: eps must be > 0, got {eps}")
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d expects 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batch_norm2d: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)")

    gview = gamma.data.reshape(1, c, 1, 1)
    bview = beta.data.reshape(1, c, 1, 1)

    if train:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            if not state.initialized:
                state.mean = mu.copy()
                state.var = var.copy()
                state.initialized = True
            else:
                state.mean = (1.0 - momentum) * state.mean + momentum * mu
                state.var = (1.0 - momentum) * state.var + momentum * var
        inv_std = 1.0 / np.sqrt(var + eps).reshape(1, c, 1, 1)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std
        out = gview * xhat + bview
        count = x.shape[0] * x.shape[2] * x.shape[3]

        def bwd(g):
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            beta._accumulate(g.sum(axis=(0, 2, 3)))
            dxhat = g * gview
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            x._accumulate(inv_std * (dxhat - (s1 + xhat * s2) / count))

        return _track(out, (x, gamma, beta), bwd)

    if not state.initialized:
        raise StatsUninitializedError(
            "stats-uninitialized: eval-mode batch norm before any training forward")
    inv_std = 1.0 / np.sqrt(state.var + eps).reshape(1, c, 1, 1)
    xhat = (x.data - state.mean.reshape(1, c, 1, 1)) * inv_std
    out = gview * xhat + bview

    def bwd(g):
        gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        beta._accumulate(g.sum(axis=(0, 2, 3)))
        x._accumulate(g * gview * inv_std)

    return _track(out, (x, gamma, beta), bwd)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from raw logits, numerically stable."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(
            f"bce_with_logits: target shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(loss.mean(), dtype=logits.dtype)
    n = z.size

    def bwd(g):
        s = np.empty_like(z)
        pos = z >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        s[~pos] = ez / (1.0 + ez)
        logits._accumulate(g * (s - t) / n)

    return _track(out, (logits,), bwd)


# -- operator sugar ----------------------------------------------------------

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(self, other)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(self, other)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.sum = tsum
Tensor.mean = tmean
Tensor.reshape = reshape
Tensor.relu = relu
Tensor.sigmoid = sigmoid
Tensor.exp = exp
Tensor.log = log
