"""Reverse-mode automatic differentiation over dense float grids.

Tensors wrap numpy arrays and record the operations applied to them on a
tape (a DAG of closures).  ``backward`` on a scalar loss walks the tape in
reverse topological order and accumulates gradients into every tensor that
requires them.

Shapes are deliberately restricted: elementwise operations accept either two
identically shaped tensors or a tensor and a python scalar.  Structured
operations (convolution, pooling, sorting, gathering) state their own shape
contracts and raise :class:`ShapeError` otherwise.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ShapeError", "set_default_dtype", "get_default_dtype",
    "precision", "set_debug", "debug_enabled",
    "add", "sub", "mul", "div", "scale", "pow_", "sqrt", "exp",
    "scale_by", "sigmoid", "tanh", "clamp_min", "clamp", "leaky_relu", "relu",
    "abs_", "mean", "sum_", "l1_distance",
    "conv2d", "upsample2x", "avgpool2x", "cyclic_shift",
    "sort1d", "sort_cols", "take_rows_per_col", "matmul", "transpose2d",
    "concat_rows", "concat_channels", "slice_rows", "slice_channels",
    "repeat_c", "channel_affine", "gather_pixels",
    "backward", "zero_grad",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_DEFAULT_DTYPE = np.float32
_DEBUG = False


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float precision (e.g. ``"float64"``)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def set_debug(enabled: bool) -> None:
    """Toggle NaN/Inf detection after every forward evaluation."""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_enabled() -> bool:
    return _DEBUG


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``data`` is immutable by convention once the tensor participates in a
    graph; ``grad`` is written only by :func:`backward` (or zeroed by
    :func:`zero_grad`).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op",
                 "_cache")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrapping a Tensor in a Tensor is not allowed")
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if arr.dtype.type not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self._cache = None

    def invalidate_cache(self) -> None:
        """Drop derived buffers; call after mutating ``data`` in place."""
        self._cache = None

    def cached(self, key, build):
        """Memoize a buffer derived from ``data`` (e.g. reshaped weights)."""
        if self._cache is None:
            self._cache = {}
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = build()
        return hit

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in another precision (not differentiable)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        # grad arrays are treated as immutable: accumulation allocates fresh
        # storage, so borrowed references from the backward pass stay safe
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(self, other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(self, other), self)

    def __pow__(self, p):
        return pow_(self, p)

    def __neg__(self):
        return scale(self, -1.0)

    def mean(self):
        return mean(self)

    def sum(self):
        return sum_(self)

    def abs(self):
        return abs_(self)


def _const_like(t: Tensor, value) -> Tensor:
    return Tensor(np.full_like(t.data, value), dtype=t.data.dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], bwd, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values in output of op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(p for p in parents if p.requires_grad) if out.requires_grad else ()
    out._backward = bwd if out.requires_grad else None
    out._op = op
    return out


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(map(str, dtypes))}; cast explicitly")


def _binary_operands(op: str, a, b):
    if not isinstance(a, Tensor):
        a, b = b, a  # at least one side is a Tensor at every call site
    if isinstance(b, Tensor):
        _check_same_dtype(op, a, b)
        if a.data.shape != b.data.shape:
            raise ShapeError(
                f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}; "
                "only identical shapes or tensor-scalar are allowed"
            )
        return a, b, None
    return a, None, a.data.dtype.type(b)


# -- elementwise suite --------------------------------------------------------


def add(a, b) -> Tensor:
    a, bt, s = _binary_operands("add", a, b)
    if bt is None:
        out = a.data + s

        def bwd(g, acc):
            acc(a, g)
    else:
        out = a.data + bt.data

        def bwd(g, acc):
            acc(a, g)
            acc(bt, g)
    return _make(out, (a,) if bt is None else (a, bt), bwd, "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const_like(b, a)
    if isinstance(b, Tensor):
        _check_same_dtype("sub", a, b)
        if a.data.shape != b.data.shape:
            raise ShapeError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")
        out = a.data - b.data

        def bwd(g, acc):
            acc(a, g)
            acc(b, -g)
        return _make(out, (a, b), bwd, "sub")
    s = a.data.dtype.type(b)
    out = a.data - s

    def bwd(g, acc):
        acc(a, g)
    return _make(out, (a,), bwd, "sub")


def mul(a, b) -> Tensor:
    a, bt, s = _binary_operands("mul", a, b)
    if bt is None:
        out = a.data * s

        def bwd(g, acc):
            acc(a, g * s)
    else:
        out = a.data * bt.data

        def bwd(g, acc):
            acc(a, g * bt.data)
            acc(bt, g * a.data)
    return _make(out, (a,) if bt is None else (a, bt), bwd, "mul")


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const_like(b, a)
    if isinstance(b, Tensor):
        _check_same_dtype("div", a, b)
        if a.data.shape != b.data.shape:
            raise ShapeError(f"div: shape mismatch {a.data.shape} vs {b.data.shape}")
        if _DEBUG and np.any(b.data == 0):
            raise ZeroDivisionError("div: divisor contains exact zeros")
        out = a.data / b.data

        def bwd(g, acc):
            acc(a, g / b.data)
            acc(b, -g * out / b.data)
        return _make(out, (a, b), bwd, "div")
    if _DEBUG and b == 0:
        raise ZeroDivisionError("div: scalar divisor is zero")
    inv = 1.0 / a.data.dtype.type(b)
    out = a.data * inv

    def bwd(g, acc):
        acc(a, g * inv)
    return _make(out, (a,), bwd, "div")


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, s)


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply by a scalar (0-d) tensor, differentiable in both operands."""
    if s.data.ndim != 0:
        raise ShapeError(f"scale_by: scale must be 0-d, got shape {s.data.shape}")
    _check_same_dtype("scale_by", a, s)
    out = a.data * s.data

    def bwd(g, acc):
        acc(a, g * s.data)
        acc(s, np.asarray((g * a.data).sum(), dtype=s.data.dtype))
    return _make(out, (a, s), bwd, "scale_by")


def pow_(a: Tensor, p: float) -> Tensor:
    """Elementwise power with scalar exponent.

    For non-integer exponents the base must be non-negative; the gradient at
    base 0 with p < 1 uses the subgradient 0.
    """
    out = a.data ** p

    def bwd(g, acc):
        base = a.data
        if float(p) == int(p) and p >= 1:
            acc(a, g * p * base ** (p - 1))
        else:
            safe = np.where(base > 0, base, 1.0)
            acc(a, np.where(base > 0, g * p * safe ** (p - 1), 0.0))
    return _make(out, (a,), bwd, "pow")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g, acc):
        safe = np.where(out > 0, out, 1.0)
        acc(a, np.where(out > 0, 0.5 * g / safe, 0.0))
    return _make(out, (a,), bwd, "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g, acc):
        acc(a, g * out)
    return _make(out, (a,), bwd, "exp")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g, acc):
        acc(a, g * out * (1.0 - out))
    return _make(out, (a,), bwd, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g, acc):
        acc(a, g * (1.0 - out * out))
    return _make(out, (a,), bwd, "tanh")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    out = np.maximum(a.data, lo)

    def bwd(g, acc):
        acc(a, np.where(a.data > lo, g, 0.0))
    return _make(out, (a,), bwd, "clamp_min")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)

    def bwd(g, acc):
        acc(a, np.where((a.data > lo) & (a.data < hi), g, 0.0))
    return _make(out, (a,), bwd, "clamp")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(a.data >= 0, a.data, slope * a.data)

    def bwd(g, acc):
        acc(a, np.where(a.data >= 0, g, slope * g))
    return _make(out, (a,), bwd, "leaky_relu")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g, acc):
        acc(a, np.where(a.data > 0, g, 0.0))
    return _make(out, (a,), bwd, "relu")


def abs_(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def bwd(g, acc):
        acc(a, g * np.sign(a.data))
    return _make(out, (a,), bwd, "abs")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=a.data.dtype))

    def bwd(g, acc):
        acc(a, np.full_like(a.data, g / n))
    return _make(out, (a,), bwd, "mean")


def sum_(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=a.data.dtype))

    def bwd(g, acc):
        acc(a, np.full_like(a.data, g))
    return _make(out, (a,), bwd, "sum")


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference between two identically shaped tensors."""
    return mean(abs_(sub(a, b)))


# -- structured ops -----------------------------------------------------------


def _as_chw(t: Tensor, op: str) -> None:
    if t.data.ndim != 3:
        raise ShapeError(f"{op}: expected (C,H,W) input, got shape {t.data.shape}")


def _pad2d(x: np.ndarray, ph: int, pw: int, padding: str) -> np.ndarray:
    C, H, W = x.shape
    if padding == "circular":
        out = np.empty((C, H + 2 * ph, W + 2 * pw), x.dtype)
        out[:, ph:ph + H, pw:pw + W] = x
        if ph:
            out[:, :ph, pw:pw + W] = x[:, H - ph:, :]
            out[:, ph + H:, pw:pw + W] = x[:, :ph, :]
        if pw:
            out[:, :, :pw] = out[:, :, W:pw + W]
            out[:, :, pw + W:] = out[:, :, pw:2 * pw]
        return out
    out = np.zeros((C, H + 2 * ph, W + 2 * pw), x.dtype)
    out[:, ph:ph + H, pw:pw + W] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (C, Hp, Wp) -> (C*kh*kw, H*W) patch matrix built from kh*kw slice copies
    C, Hp, Wp = xp.shape
    H, W = Hp - kh + 1, Wp - kw + 1
    col = np.empty((C, kh, kw, H, W), xp.dtype)
    for a in range(kh):
        for b in range(kw):
            col[:, a, b] = xp[:, a:a + H, b:b + W]
    return col.reshape(C * kh * kw, H * W)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: str = "circular") -> Tensor:
    """Stride-1 same-size 2D convolution (cross-correlation) with odd kernels.

    ``circular`` padding wraps indices toroidally, which makes the operation
    commute exactly with :func:`cyclic_shift`.
    """
    _as_chw(x, "conv2d")
    if padding not in ("circular", "zero"):
        raise ValueError(f"conv2d: unknown padding '{padding}'")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: weights must be (K,C,kh,kw), got {w.data.shape}")
    K, Cw, kh, kw = w.data.shape
    C, H, W = x.data.shape
    if Cw != C:
        raise ShapeError(f"conv2d: weights expect {Cw} input channels, input has {C}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got ({kh},{kw})")
    if H < kh or W < kw:
        raise ShapeError(f"conv2d: input {H}x{W} smaller than kernel {kh}x{kw}")
    if b.data.shape != (K,):
        raise ShapeError(f"conv2d: bias must have shape ({K},), got {b.data.shape}")
    _check_same_dtype("conv2d", x, w, b)
    ph, pw = kh // 2, kw // 2

    col = _im2col(_pad2d(x.data, ph, pw, padding), kh, kw)
    wmat = w.data.reshape(K, C * kh * kw)
    out = (wmat @ col).reshape(K, H, W)
    out += b.data[:, None, None]
    # the patch matrix is only needed for the weight gradient
    col_saved = col if w.requires_grad else None

    def bwd(g, acc):
        if w.requires_grad:
            gy = g.reshape(K, H * W)
            acc(w, (gy @ col_saved.T).reshape(K, C, kh, kw))
        if b.requires_grad:
            acc(b, g.sum(axis=(1, 2)))
        if x.requires_grad:
            # the adjoint of a same-padded correlation is the same-padded
            # correlation with the channel-transposed, spatially flipped kernel
            gcol = _im2col(_pad2d(g, ph, pw, padding), kh, kw)
            wflip = w.cached("conv_flip", lambda: np.ascontiguousarray(
                w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(C, K * kh * kw))
            acc(x, (wflip @ gcol).reshape(C, H, W))
    return _make(out, (x, w, b), bwd, "conv2d")


def upsample2x(x: Tensor, mode: str = "bilinear_circular") -> Tensor:
    """Double both spatial dimensions.

    ``bilinear_circular`` interpolates with toroidal neighbor indexing so a
    one-texel input shift becomes exactly a two-texel output shift.
    """
    _as_chw(x, "upsample2x")
    C, H, W = x.data.shape
    if mode == "nearest":
        out = x.data.repeat(2, axis=1).repeat(2, axis=2)

        def bwd(g, acc):
            acc(x, g.reshape(C, H, 2, W, 2).sum(axis=(2, 4)))
        return _make(out, (x,), bwd, "upsample2x")
    if mode != "bilinear_circular":
        raise ValueError(f"upsample2x: unknown mode '{mode}'")

    d = x.data
    rows = np.empty((C, 2 * H, W), dtype=d.dtype)
    rows[:, 0::2, :] = 0.75 * d + 0.25 * np.roll(d, 1, axis=1)
    rows[:, 1::2, :] = 0.75 * d + 0.25 * np.roll(d, -1, axis=1)
    out = np.empty((C, 2 * H, 2 * W), dtype=d.dtype)
    out[:, :, 0::2] = 0.75 * rows + 0.25 * np.roll(rows, 1, axis=2)
    out[:, :, 1::2] = 0.75 * rows + 0.25 * np.roll(rows, -1, axis=2)

    def bwd(g, acc):
        ge, go = g[:, :, 0::2], g[:, :, 1::2]
        gr = 0.75 * (ge + go) + 0.25 * (np.roll(ge, -1, axis=2) + np.roll(go, 1, axis=2))
        ge, go = gr[:, 0::2, :], gr[:, 1::2, :]
        acc(x, 0.75 * (ge + go) + 0.25 * (np.roll(ge, -1, axis=1) + np.roll(go, 1, axis=1)))
    return _make(out, (x,), bwd, "upsample2x")


def avgpool2x(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling; spatial dims must be even."""
    _as_chw(x, "avgpool2x")
    C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avgpool2x: dims must be even, got {H}x{W}")
    out = x.data.reshape(C, H // 2, 2, W // 2, 2).mean(axis=(2, 4))

    def bwd(g, acc):
        acc(x, (g * 0.25).repeat(2, axis=1).repeat(2, axis=2))
    return _make(out, (x,), bwd, "avgpool2x")


def cyclic_shift(x: Tensor, dx: int, dy: int) -> Tensor:
    """Toroidal translation by ``dx`` columns (+x right) and ``dy`` rows (+y down)."""
    _as_chw(x, "cyclic_shift")
    out = np.roll(x.data, (dy, dx), axis=(1, 2))

    def bwd(g, acc):
        acc(x, np.roll(g, (-dy, -dx), axis=(1, 2)))
    return _make(out, (x,), bwd, "cyclic_shift")


def sort1d(x: Tensor):
    """Ascending sort of a 1D tensor; returns (sorted, permutation).

    ``permutation[i]`` is the source index of output element ``i``.  The
    backward pass routes output gradients through the inverse permutation.
    """
    if x.data.ndim != 1 or x.data.size < 1:
        raise ShapeError(f"sort1d: expected non-empty 1D tensor, got shape {x.data.shape}")
    perm = np.argsort(x.data, kind="stable")
    out = x.data[perm]

    def bwd(g, acc):
        dg = np.zeros_like(x.data)
        dg[perm] = g
        acc(x, dg)
    t = _make(out, (x,), bwd, "sort1d")
    return t, perm


def sort_cols(x: Tensor):
    """Independently sort each column of an (n, D) tensor ascending."""
    if x.data.ndim != 2:
        raise ShapeError(f"sort_cols: expected 2D tensor, got shape {x.data.shape}")
    perm = np.argsort(x.data, axis=0, kind="stable")
    out = np.take_along_axis(x.data, perm, axis=0)

    def bwd(g, acc):
        dg = np.zeros_like(x.data)
        np.put_along_axis(dg, perm, g, axis=0)
        acc(x, dg)
    t = _make(out, (x,), bwd, "sort_cols")
    return t, perm


def take_rows_per_col(x: Tensor, indices: np.ndarray) -> Tensor:
    """out[i, d] = x[indices[i, d], d] for an (n, D) index array.

    Indices must be unique within each column (sampling without replacement),
    which lets the backward pass scatter without accumulation conflicts.
    """
    if x.data.ndim != 2 or indices.ndim != 2 or indices.shape[1] != x.data.shape[1]:
        raise ShapeError(
            f"take_rows_per_col: data {x.data.shape} vs indices {indices.shape}")
    out = np.take_along_axis(x.data, indices, axis=0)

    def bwd(g, acc):
        dg = np.zeros_like(x.data)
        np.put_along_axis(dg, indices, g, axis=0)
        acc(x, dg)
    return _make(out, (x,), bwd, "take_rows_per_col")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    _check_same_dtype("matmul", a, b)
    out = a.data @ b.data

    def bwd(g, acc):
        acc(a, g @ b.data.T)
        acc(b, a.data.T @ g)
    return _make(out, (a, b), bwd, "matmul")


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d: expected 2D tensor, got {a.data.shape}")
    out = np.ascontiguousarray(a.data.T)

    def bwd(g, acc):
        acc(a, np.ascontiguousarray(g.T))
    return _make(out, (a,), bwd, "transpose2d")


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_rows: expects a non-empty list of 2D tensors")
    _check_same_dtype("concat_rows", *parts)
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def bwd(g, acc):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            acc(p, g[lo:hi])
    return _make(out, tuple(parts), bwd, "concat_rows")


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts or any(p.data.ndim != 3 for p in parts):
        raise ShapeError("concat_channels: expects a non-empty list of (C,H,W) tensors")
    _check_same_dtype("concat_channels", *parts)
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def bwd(g, acc):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            acc(p, g[lo:hi])
    return _make(out, tuple(parts), bwd, "concat_channels")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_rows: expected 2D tensor, got {a.data.shape}")
    start, stop, _ = slice(start, stop).indices(a.data.shape[0])
    out = a.data[start:stop].copy()

    def bwd(g, acc):
        dg = np.zeros_like(a.data)
        dg[start:stop] = g
        acc(a, dg)
    return _make(out, (a,), bwd, "slice_rows")


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    _as_chw(a, "slice_channels")
    out = a.data[start:stop].copy()

    def bwd(g, acc):
        dg = np.zeros_like(a.data)
        dg[start:stop] = g
        acc(a, dg)
    return _make(out, (a,), bwd, "slice_channels")


def repeat_c(a: Tensor, reps: int) -> Tensor:
    """Broadcast a (1,H,W) tensor to (reps,H,W); backward sums over channels."""
    _as_chw(a, "repeat_c")
    if a.data.shape[0] != 1:
        raise ShapeError(f"repeat_c: expected single-channel input, got {a.data.shape}")
    out = np.broadcast_to(a.data, (reps,) + a.data.shape[1:]).copy()

    def bwd(g, acc):
        acc(a, g.sum(axis=0, keepdims=True))
    return _make(out, (a,), bwd, "repeat_c")


def channel_affine(x: Tensor, s: Tensor, b: Tensor) -> Tensor:
    """Per-channel scale and bias: out[c] = x[c] * s[c] + b[c]."""
    _as_chw(x, "channel_affine")
    C = x.data.shape[0]
    if s.data.shape != (C,) or b.data.shape != (C,):
        raise ShapeError(
            f"channel_affine: scale/bias must have shape ({C},), got {s.data.shape}/{b.data.shape}"
        )
    _check_same_dtype("channel_affine", x, s, b)
    out = x.data * s.data[:, None, None] + b.data[:, None, None]

    def bwd(g, acc):
        acc(x, g * s.data[:, None, None])
        acc(s, (g * x.data).sum(axis=(1, 2)))
        acc(b, g.sum(axis=(1, 2)))
    return _make(out, (x, s, b), bwd, "channel_affine")


def gather_pixels(x: Tensor, mask: np.ndarray) -> Tensor:
    """Collect the channel vectors of masked pixels in raster order into (n, C)."""
    _as_chw(x, "gather_pixels")
    if mask.shape != x.data.shape[1:]:
        raise ShapeError(f"gather_pixels: mask {mask.shape} vs spatial {x.data.shape[1:]}")
    mask = mask.astype(bool)
    out = np.ascontiguousarray(x.data[:, mask].T)

    def bwd(g, acc):
        dg = np.zeros_like(x.data)
        dg[:, mask] = g.T
        acc(x, dg)
    return _make(out, (x,), bwd, "gather_pixels")


# -- backward pass ------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dt into ``t.grad`` for every requires_grad ancestor.

    Repeated calls accumulate further unless gradients are zeroed in between.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not connected to any requires_grad tensor")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    flow: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    owned: dict[int, bool] = {id(loss): True}

    def acc(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        k = id(t)
        cur = flow.get(k)
        if cur is None:
            # borrow without copying; promote to an owned buffer on first reuse
            flow[k] = g
            owned[k] = False
        elif owned[k]:
            cur += g
        else:
            flow[k] = cur + g
            owned[k] = True
    for node in reversed(topo):
        g = flow.pop(id(node), None)
        owned.pop(id(node), None)
        if g is None:
            continue
        node.accumulate_grad(g)
        if node._backward is not None:
            node._backward(g, acc)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
