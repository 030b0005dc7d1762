"""Minimal reverse-mode autodiff tensor engine on numpy storage.

Storage is row-major contiguous. Binary ops broadcast with trailing-axis
alignment (numpy rules); gradients of broadcast operands are sum-reduced back
to the operand shape. Training code runs in f32, gradient verification in f64.

The computation graph is built dynamically while grad mode is enabled and
freed by ``backward``; tensors with ``requires_grad=False`` never hold graph
edges and are safe to share across workers.

Every op output is checked for NaN/Inf (disable with ``finite_checks(False)``
for micro-benchmarks). Ops raise :class:`DimensionError` on shape violations.
"""

from __future__ import annotations

import contextlib
import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, FormatError, UsageError, ValidationError

F32 = np.float32
F64 = np.float64
_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True
_finite_checks = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference/sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _check_finite(data: np.ndarray, opname: str) -> None:
    if _finite_checks:
        # single reduction: any NaN/Inf poisons the sum
        if not np.isfinite(np.sum(data)):
            raise ValidationError(f"{opname}: non-finite values in result")


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in _ALLOWED_DTYPES:
        raise ValidationError(f"unsupported dtype {dt}; use f32 or f64")
    return dt


class Tensor:
    """N-d float array with optional reverse-mode gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_edges")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _ALLOWED_DTYPES else F32
        self.data = np.ascontiguousarray(arr, dtype=_as_dtype(dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        # list of (parent Tensor, vjp: gout -> grad contribution)
        self._edges: list[tuple["Tensor", Callable[[np.ndarray], np.ndarray]]] = []

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _make(data: np.ndarray, opname: str,
          edges: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    _check_finite(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled:
        live = [(p, fn) for p, fn in edges if p.requires_grad]
        out.requires_grad = bool(live)
        out._edges = live
    else:
        out.requires_grad = False
        out._edges = []
    return out


def _binary_dtype(a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise DimensionError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def _reduce_broadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast to reach g's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- constructors -----------------------------------------------------------

def zeros(shape, dtype=F32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=F32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def full(shape, value, dtype=F32) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


def randn(rng: np.random.Generator, shape, dtype=F32, requires_grad=False) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=requires_grad)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _coerce(b, a.dtype)
    _binary_dtype(a, b)
    out = a.data + b.data
    return _make(out, "add", [
        (a, lambda g: _reduce_broadcast(g, a.shape)),
        (b, lambda g: _reduce_broadcast(g, b.shape)),
    ])


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _coerce(b, a.dtype)
    _binary_dtype(a, b)
    out = a.data - b.data
    return _make(out, "sub", [
        (a, lambda g: _reduce_broadcast(g, a.shape)),
        (b, lambda g: _reduce_broadcast(-g, b.shape)),
    ])


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _coerce(b, a.dtype)
    _binary_dtype(a, b)
    out = a.data * b.data
    return _make(out, "mul", [
        (a, lambda g: _reduce_broadcast(g * b.data, a.shape)),
        (b, lambda g: _reduce_broadcast(g * a.data, b.shape)),
    ])


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _coerce(b, a.dtype)
    _binary_dtype(a, b)
    out = a.data / b.data
    return _make(out, "div", [
        (a, lambda g: _reduce_broadcast(g / b.data, a.shape)),
        (b, lambda g: _reduce_broadcast(-g * a.data / (b.data * b.data), b.shape)),
    ])


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", [(x, lambda g: g * out)])


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, "tanh", [(x, lambda g: g * (1.0 - out * out))])


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, "sqrt", [(x, lambda g: g * (0.5 / out))])


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU; the derivative is precomputed in the forward
    pass (cache-hot) so the backward pass is a single multiply."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * (xd + _GELU_A * xd * x2))
    half_1p_th = 0.5 * (1.0 + th)
    out = xd * half_1p_th
    if _grad_enabled and x.requires_grad:
        dfac = half_1p_th + 0.5 * xd * (1.0 - th * th) * (_GELU_C * (1.0 + 3.0 * _GELU_A * x2))
        return _make(out.astype(x.dtype, copy=False), "gelu", [(x, lambda g: g * dfac)])
    return _make(out.astype(x.dtype, copy=False), "gelu", [])


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)

    def vjp(g):
        mask = (x.data >= lo) & (x.data <= hi)
        return g * mask

    return _make(out, "clip", [(x, vjp)])


# -- reductions ---------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(np.asarray(g).reshape(()), x.shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, x.shape)

    return _make(out, "sum", [(x, vjp)])


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)
    n = x.size if axis is None else _axis_count(x.shape, axis)

    def vjp(g):
        if axis is None:
            gg = np.asarray(g).reshape(())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, x.shape) * np.asarray(1.0 / n, dtype=x.dtype)

    return _make(out, "mean", [(x, vjp)])


def variance(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (ddof=0) along axis."""
    mu = np.mean(x.data, axis=axis, keepdims=True)
    centered = x.data - mu
    out = np.mean(centered * centered, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)
    n = x.size if axis is None else _axis_count(x.shape, axis)

    def vjp(g):
        if axis is None:
            gg = g
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape) * (2.0 / n) * centered).astype(x.dtype, copy=False)

    return _make(out, "variance", [(x, vjp)])


def _axis_count(shape, axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    return int(np.prod([shape[a] for a in axis]))


# -- shape manipulation -------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if -1 not in shape and int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    out = x.data.reshape(shape)  # numpy copies only when non-contiguous
    return _make(out, "reshape", [(x, lambda g: g.reshape(x.shape))])


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = np.transpose(x.data, axes)  # view; consumers copy when they must
    return _make(out, "transpose", [(x, lambda g: np.transpose(g, inv))])


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return _make(out, "broadcast_to", [(x, lambda g: _reduce_broadcast(g, x.shape))])


def contiguous(x: Tensor) -> Tensor:
    """Materialize a contiguous copy (identity for gradients)."""
    out = np.ascontiguousarray(x.data)
    return _make(out, "contiguous", [(x, lambda g: g)])


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise DimensionError("concat of empty sequence")
    axis = axis if axis >= 0 else axis + ts[0].ndim
    ref = ts[0]
    for t in ts[1:]:
        if t.ndim != ref.ndim or t.dtype != ref.dtype:
            raise DimensionError("concat operands must share rank and dtype")
        for ax in range(ref.ndim):
            if ax != axis and t.shape[ax] != ref.shape[ax]:
                raise DimensionError(
                    f"concat extent mismatch on axis {ax}: {t.shape} vs {ref.shape}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    edges = []
    off = 0
    for t in ts:
        n = t.shape[axis]
        lo = off

        def vjp(g, lo=lo, n=n):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, lo + n)
            return np.ascontiguousarray(g[tuple(idx)])

        edges.append((t, vjp))
        off += n
    return _make(out, "concat", edges)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis if axis >= 0 else axis + x.ndim
    extent = x.shape[axis]
    if not (0 <= start < stop <= extent):
        raise DimensionError(f"slice [{start}:{stop}) out of bounds for extent {extent}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    out = np.ascontiguousarray(x.data[tuple(idx)])

    def vjp(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[tuple(idx)] = g
        return gx

    return _make(out, "slice", [(x, vjp)])


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have rank >= 2")
    _binary_dtype(a, b)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp_a(g):
        if b.ndim == 2:
            g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
            return np.matmul(g2, b.data.T).reshape(a.shape)
        return _reduce_broadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)

    def vjp_b(g):
        if b.ndim == 2:
            # collapse leading axes into one GEMM instead of batched-then-reduce
            a2 = np.ascontiguousarray(a.data).reshape(-1, a.shape[-1])
            g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
            return np.matmul(a2.T, g2)
        return _reduce_broadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return _make(out, "matmul", [(a, vjp_a), (b, vjp_b)])


def softmax(x: Tensor, axis: int) -> Tensor:
    if not (-x.ndim <= axis < x.ndim):
        raise DimensionError(f"softmax axis {axis} invalid for rank {x.ndim}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return out * (g - dot)

    return _make(out, "softmax", [(x, vjp)])


LN_EPS = 1e-5


def layer_norm_normalize(x: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine terms)."""
    if x.shape[-1] < 2:
        raise DimensionError("layer_norm_normalize needs last-axis extent >= 2")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(LN_EPS, dtype=x.dtype))
    out = xc * inv

    def vjp(g):
        gm = np.mean(g, axis=-1, keepdims=True)
        gy = np.mean(g * out, axis=-1, keepdims=True)
        return inv * (g - gm - out * gy)

    return _make(out, "layer_norm_normalize", [(x, vjp)])


def l2_normalize(x: Tensor, axis: int, eps: float = 1e-12) -> Tensor:
    sq = np.sum(x.data * x.data, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(sq + np.asarray(eps, dtype=x.dtype))
    out = x.data * inv

    def vjp(g):
        dot = np.sum(g * x.data, axis=axis, keepdims=True)
        return inv * g - (inv ** 3) * dot * x.data

    return _make(out, "l2_normalize", [(x, vjp)])


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation. x: [cin,h,w] or [b,cin,h,w]; k: [cout,cin,kh,kw]."""
    _binary_dtype(x, k)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise DimensionError("conv2d expects x rank 3/4 and k rank 4")
    b, cin, h, w = xd.shape
    cout, kcin, kh, kw = k.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValidationError("conv2d kernel extents must be odd")
    if stride < 1:
        raise ValidationError("conv2d stride must be >= 1")
    if h + 2 * pad - kh < 0 or w + 2 * pad - kw < 0:
        raise DimensionError(
            f"conv2d output extent undefined for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}")
    # floor convention: trailing rows/cols that fit no window are dropped
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                       # [b,cin,ho,wo,kh,kw]
    patches = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    patches = patches.reshape(b, ho * wo, cin * kh * kw)
    kmat = k.data.reshape(cout, cin * kh * kw)
    out = np.matmul(patches, kmat.T)                          # [b, ho*wo, cout]
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(b, cout, ho, wo)
    if squeeze:
        out = out[0]

    def vjp_k(g):
        gd = g[None] if squeeze else g
        g2 = gd.reshape(gd.shape[0], cout, ho * wo).transpose(0, 2, 1)
        gk = np.einsum("bno,bnp->op", g2, patches)
        return gk.reshape(cout, cin, kh, kw)

    def vjp_x(g):
        gd = g[None] if squeeze else g
        g2 = np.ascontiguousarray(gd.reshape(gd.shape[0], cout, ho * wo).transpose(0, 2, 1))
        gp = np.matmul(g2, kmat)                              # [b, ho*wo, cin*kh*kw]
        gp = gp.reshape(b, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((b, cin, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gp[:, :, :, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx[0] if squeeze else gx

    return _make(out, "conv2d", [(x, vjp_x), (k, vjp_k)])


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Interpolation matrix R[out,in] for align-corners-false bilinear resize."""
    r = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        i0 = math.floor(src)
        w1 = src - i0
        i0c = min(max(i0, 0), n_in - 1)
        i1c = min(max(i0 + 1, 0), n_in - 1)
        r[o, i0c] += 1.0 - w1
        r[o, i1c] += w1
    return r


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes (align-corners-false convention)."""
    if out_h < 1 or out_w < 1:
        raise ValidationError("bilinear_resize target extents must be >= 1")
    if x.ndim < 2:
        raise DimensionError("bilinear_resize needs rank >= 2")
    h, w = x.shape[-2], x.shape[-1]
    ry = _resize_matrix(h, out_h, x.dtype)                    # [out_h, h]
    rx = _resize_matrix(w, out_w, x.dtype)                    # [out_w, w]
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def vjp(g):
        return np.matmul(np.matmul(ry.T, g), rx)

    return _make(out, "bilinear_resize", [(x, vjp)])


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValidationError("embedding_lookup indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError("embedding_lookup index out of range")
    out = np.ascontiguousarray(table.data[idx])

    def vjp(g):
        gt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(gt, idx, g)
        return gt

    return _make(out, "embedding_lookup", [(table, vjp)])


def sinusoidal_table(max_t: int, dim: int = 64, min_freq: float = 1e-4,
                     dtype=F32) -> np.ndarray:
    """[max_t+1, dim] sinusoidal embeddings; dim/2 frequencies geometric from 1 to min_freq."""
    if dim % 2 != 0:
        raise ValidationError("sinusoidal_table dim must be even")
    half = dim // 2
    freqs = min_freq ** (np.arange(half) / (half - 1))
    t = np.arange(max_t + 1)[:, None]
    ang = t * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


# -- backward pass ------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss into .grad of every
    tracked ancestor. Repeated calls accumulate; the graph is freed after."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    # iterative post-order topological sort
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._edges:
            if id(parent) not in seen:
                stack.append((parent, False))

    # per-pass upstream buffers, seeded at the loss; .grad receives the final
    # accumulated buffer per node (buffers may alias across trivial vjps and
    # are never mutated in place)
    upstream: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(topo):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in node._edges:
            contrib = vjp(g)
            key = id(parent)
            cur = upstream.get(key)
            upstream[key] = contrib if cur is None else cur + contrib
        node._edges = []  # free the graph


def clear_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- gradient verification ------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      coords: Sequence[int] | None = None,
                      zero_atol: float = 1e-8) -> float:
    """Max relative error between backward() gradients of f at x and central
    finite differences: |analytic - central| / (|analytic| + |central| + 1e-12).

    Coordinates where both magnitudes fall below ``zero_atol`` contribute zero
    error; without this floor a numerically constant f (e.g. sum of softmax)
    reports errors near 1 from pure rounding noise in the difference quotient.

    Requires f64; checks all coordinates unless ``coords`` selects a subset.
    """
    if x.dtype != np.dtype(F64):
        raise ValidationError("finite_diff_check requires f64 input")
    probe = Tensor(x.data.copy(), dtype=F64, requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise UsageError("finite_diff_check needs a scalar-valued f")
    backward(out)
    analytic = (probe.grad if probe.grad is not None
                else np.zeros(probe.shape, dtype=F64)).reshape(-1)

    flat = x.data.reshape(-1)
    index_list = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in index_list:
        orig = flat[i]
        xp = x.data.copy().reshape(-1)
        xp[i] = orig + h
        xm = x.data.copy().reshape(-1)
        xm[i] = orig - h
        with no_grad():
            fp = f(Tensor(xp.reshape(x.shape), dtype=F64)).item()
            fm = f(Tensor(xm.reshape(x.shape), dtype=F64)).item()
        central = (fp - fm) / (2.0 * h)
        a = float(analytic[i])
        if abs(a) < zero_atol and abs(central) < zero_atol:
            continue
        err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
        worst = max(worst, err)
    return worst


# -- binary tensor dump (test fixtures) ----------------------------------------

_DUMP_MAGIC = b"GPTN"
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_tensor(x: Tensor, path) -> None:
    """magic 'GPTN', u8 version=1, u8 dtype code (1=f32, 2=f64), u8 rank,
    little-endian u64 extents, then little-endian payload."""
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<BBB", 1, _DTYPE_CODES[x.dtype], x.ndim))
        for extent in x.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(np.ascontiguousarray(x.data).astype(x.dtype.newbyteorder("<")).tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 7 or blob[:4] != _DUMP_MAGIC:
        raise FormatError(f"{path}: bad tensor dump magic")
    version, code, rank = struct.unpack("<BBB", blob[4:7])
    if version != 1:
        raise FormatError(f"{path}: unsupported tensor dump version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    off = 7
    if len(blob) < off + 8 * rank:
        raise FormatError(f"{path}: truncated tensor dump header")
    shape = struct.unpack(f"<{rank}Q", blob[off:off + 8 * rank]) if rank else ()
    off += 8 * rank
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    expected = count * dtype.itemsize
    if len(blob) - off != expected:
        raise FormatError(f"{path}: payload length {len(blob) - off}, expected {expected}")
    data = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=count, offset=off)
    return Tensor(data.astype(dtype).reshape(shape))
