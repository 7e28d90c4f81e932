"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` context are recorded
together with a vector-Jacobian closure; outside any tape they run as plain
numpy math and produce constant tensors. ``backward(tape, loss)`` replays the
record in reverse creation order, which is a valid topological order because
a tensor can only be consumed after it has been produced.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "matmul",
    "tsum",
    "mean",
    "reshape",
    "concat",
    "take",
    "clip",
    "detach",
    "elu",
    "sigmoid",
    "dense",
    "conv2d",
    "avgpool2d",
    "batchnorm",
    "BatchNormStats",
]


class Tensor:
    """n-dimensional float array with optional gradient tracking.

    ``requires_grad`` marks a leaf as a parameter (or any tensor produced by a
    recorded operation that depends on one).
    """

    __slots__ = ("data", "requires_grad", "name", "_tape", "_untracked", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional[int] = None  # id of the recording tape; an int avoids a reference cycle
        # derived from a parameter while no tape was recording
        self._untracked = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

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
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def detach(self):
        return detach(self)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; nested tapes are allowed and the innermost one
    records.
    """

    _ids = itertools.count()

    def __init__(self):
        self.records: list[_Record] = []
        self.id = next(Tape._ids)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        out.requires_grad = True
        out._tape = self.id
        self.records.append(_Record(out, inputs, vjp))


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _result(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad or t._untracked for t in inputs):
        tape = _active_tape()
        if tape is not None:
            tape.record(out, tuple(inputs), vjp)
        else:
            out._untracked = True
    return out


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where clamping was active."""
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _result(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


def elu(a: Tensor) -> Tensor:
    """ELU with alpha = 1."""
    ad = a.data
    low = np.minimum(ad, 0.0)
    out = np.maximum(ad, 0.0) + np.expm1(low)
    # d/dx is 1 above zero and exp(x) below, i.e. exp(min(x, 0))
    slope = np.exp(low)
    return _result(out, (a,), lambda g: (g * slope,))


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(ad))
    out = np.where(ad >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(ad.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


# ------------------------------------------------------------- shape / reduce


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; repeated integer indices accumulate."""
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.asarray(a.data[index]), (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul inner dimension mismatch: {ad.shape[1]} vs {bd.shape[0]}")
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ------------------------------------------------------------------- layers


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights + bias`` for x of shape (N, D)."""
    if x.ndim != 2:
        raise ValueError(f"dense expects input of shape (N, D), got {x.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ValueError(f"dense input dimension D={x.shape[1]} does not match weights rows {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"dense bias shape {bias.shape} does not match output dimension K={weights.shape[1]}")
    xd, wd = x.data, weights.data
    return _result(
        xd @ wd + bias.data,
        (x, weights, bias),
        lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)),
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 stride-1 convolution with zero "same" padding, NCHW layout.

    Computes cross-correlation (no kernel flip), the usual deep-learning
    convention. Internally the batch is laid out channel-major over a
    zero-padded, flattened spatial grid so that each of the nine kernel taps
    is one contiguous 2-D matmul; positions that land on padding are computed
    and then discarded.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d expects input (N, C, H, W), got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects kernel (F, C, 3, 3), got shape {kernel.shape}")
    n, c, h, w = x.shape
    f = kernel.shape[0]
    if kernel.shape[1] != c:
        raise ValueError(f"conv2d channel mismatch: input C={c}, kernel C={kernel.shape[1]}")
    if bias.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match filter count F={f}")

    dtype = np.result_type(x.dtype, kernel.dtype)
    hp, wp = h + 2, w + 2
    total = n * hp * wp
    base = wp + 1
    span = total - 2 * base
    taps = [(i, j, i * wp + j) for i in range(3) for j in range(3)]

    xp = np.zeros((c, n, hp, wp), dtype=dtype)
    xp[:, :, 1:-1, 1:-1] = x.data.transpose(1, 0, 2, 3)
    xflat = xp.reshape(c, total)
    # (3, 3, F, C) so each tap is a contiguous matrix BLAS accepts
    ktaps = np.ascontiguousarray(kernel.data.transpose(2, 3, 0, 1), dtype=dtype)

    acc = None
    for i, j, s in taps:
        term = ktaps[i, j] @ xflat[:, s : s + span]
        acc = term if acc is None else acc.__iadd__(term)
    full = np.empty((f, total), dtype=dtype)
    full[:, base : base + span] = acc
    out = full.reshape(f, n, hp, wp)[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)
    out = out + bias.data.reshape(1, f, 1, 1)

    def vjp(g):
        gp = np.zeros((f, n, hp, wp), dtype=g.dtype)
        gp[:, :, 1:-1, 1:-1] = g.transpose(1, 0, 2, 3)
        gseg = gp.reshape(f, total)[:, base : base + span]
        dk = np.empty((3, 3, f, c), dtype=g.dtype)
        dxflat = np.zeros((c, total), dtype=g.dtype)
        for i, j, s in taps:
            dk[i, j] = gseg @ xflat[:, s : s + span].T
            dxflat[:, s : s + span] += ktaps[i, j].T @ gseg
        dx = dxflat.reshape(c, n, hp, wp)[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(dx), dk.transpose(2, 3, 0, 1), g.sum(axis=(0, 2, 3))

    return _result(out, (x, kernel, bias), vjp)


def avgpool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; odd sizes are edge-replicated first."""
    if x.ndim != 4:
        raise ValueError(f"avgpool2d expects input (N, C, H, W), got shape {x.shape}")
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    xd = x.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    hh, ww = xd.shape[2] // 2, xd.shape[3] // 2
    out = xd.reshape(n, c, hh, 2, ww, 2).mean(axis=(3, 5))

    def vjp(g):
        gx = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
        if ph or pw:
            # fold the replicated edge back onto the last real row/column
            if ph:
                gx[:, :, h - 1, :] += gx[:, :, h, :]
                gx = gx[:, :, :h, :]
            if pw:
                gx[:, :, :, w - 1] += gx[:, :, :, w]
                gx = gx[:, :, :, :w]
        return (np.ascontiguousarray(gx),)

    return _result(out, (x,), vjp)


class BatchNormStats:
    """Running mean/variance for one batchnorm layer."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, training: bool) -> Tensor:
    """Per-channel normalization; channel axis is 1, all other axes are pooled.

    In training mode batch statistics are used (biased variance) and the
    running statistics are updated in place.
    """
    xd = x.data
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = [1] * xd.ndim
    bshape[1] = xd.shape[1]
    bshape = tuple(bshape)
    g_, b_ = gamma.data.reshape(bshape), beta.data.reshape(bshape)

    if not training:
        invstd = 1.0 / np.sqrt(stats.var + stats.eps)
        scale = (gamma.data * invstd).reshape(bshape)
        xhat = (xd - stats.mean.reshape(bshape)) * invstd.reshape(bshape)
        return _result(
            xhat * g_ + b_,
            (x, gamma, beta),
            lambda g: (g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)),
        )

    if xd.shape[0] < 2:
        raise ValueError("batchnorm in training mode needs a batch of at least 2 samples")
    m = xd.size // xd.shape[1]
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + stats.eps)
    xhat = xc * invstd
    mom = stats.momentum
    stats.mean = mom * stats.mean + (1 - mom) * mu.reshape(-1)
    stats.var = mom * stats.var + (1 - mom) * var.reshape(-1) * (m / max(m - 1, 1))

    def vjp(g):
        dxhat = g * g_
        dx = (invstd / m) * (
            m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(xhat * g_ + b_, (x, gamma, beta), vjp)


# ------------------------------------------------------------------ backward


def backward(tape: Tape, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> dict:
    """Gradients of a scalar ``loss`` with respect to parameters.

    Returns a dict keyed by parameter tensor. When ``params`` is given every
    listed tensor gets an entry (zeros if unreachable); otherwise all leaf
    parameters reached by the replay are returned.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._tape is not None and loss._tape != tape.id:
        raise ValueError("loss was recorded on a different tape")
    if loss._untracked:
        raise ValueError("loss depends on parameters but was computed outside any tape")
    if loss._tape is None and loss.requires_grad is False and params is None:
        return {}

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss._tape is None and loss.requires_grad:
        leaves[id(loss)] = loss

    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._tape is None:
                leaves[key] = inp

    if params is None:
        return {leaves[k]: grads[k] for k in leaves if k in grads}
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}
