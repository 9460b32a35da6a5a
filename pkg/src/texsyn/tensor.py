"""Dense rank-4 NCHW tensor type and the forward numeric kernels.

Everything else in the package is built on the functions here. Tensors are
immutable after construction; all kernels are pure functions returning fresh
tensors (the one documented exception is ``batch_norm`` in train mode, which
updates the running statistics passed to it).

Convolution uses the cross-correlation convention (no filter flip). Partial
padding is implemented as post-hoc ratio re-weighting of a zero-padded
convolution: each output is scaled by (full kernel tap count) / (in-bounds
tap count), so interior outputs are untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

F32 = np.float32
F64 = np.float64

_VALID_DTYPES = (np.dtype(F32), np.dtype(F64))


class ShapeError(ValueError):
    """Raised when tensor dimensions violate a kernel's contract."""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


class DegenerateBatchError(ShapeError):
    """Raised by train-mode batch norm when N*H*W < 2."""


class Tensor:
    """Immutable dense rank-4 array in (batch, channel, height, width) order.

    The buffer is a C-contiguous numpy array with ``writeable=False``; ``data``
    exposes it directly. dtype is float32 by default, float64 for gradient
    checking.
    """

    __slots__ = ("data",)

    def __init__(self, array, dtype=None):
        arr = np.asarray(array)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype not in _VALID_DTYPES:
            arr = arr.astype(F32)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4 (NCHW), got rank {arr.ndim}")
        arr = np.ascontiguousarray(arr)
        if arr.flags.owndata:
            arr.flags.writeable = False
        else:
            arr = arr.copy()
            arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    def is_empty(self) -> bool:
        return 0 in self.data.shape

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    @staticmethod
    def zeros(dims, dtype=F32) -> "Tensor":
        return Tensor(np.zeros(dims, dtype=dtype))

    @staticmethod
    def full(dims, value, dtype=F32) -> "Tensor":
        return Tensor(np.full(dims, value, dtype=dtype))

    def __repr__(self):
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype})"


@dataclass(frozen=True)
class Padding:
    """Border handling for conv2d: none, zero, or partial (re-weighted zero)."""

    mode: str  # "none" | "zero" | "partial"
    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0

    @staticmethod
    def none() -> "Padding":
        return Padding("none")

    @staticmethod
    def zero(top: int, bottom: int, left: int, right: int) -> "Padding":
        return Padding("zero", top, bottom, left, right)

    @staticmethod
    def partial(top: int, bottom: int, left: int, right: int) -> "Padding":
        return Padding("partial", top, bottom, left, right)

    def extent(self) -> tuple[int, int, int, int]:
        if self.mode == "none":
            return (0, 0, 0, 0)
        return (self.top, self.bottom, self.left, self.right)


@dataclass(frozen=True)
class ConvSpec:
    """Stride and padding for a cross-correlation."""

    stride: int = 1
    padding: Padding = Padding("none")


def _require_nonempty(*tensors: Tensor):
    for t in tensors:
        if t.is_empty():
            raise ShapeError(f"empty tensor not accepted here: dims {t.dims}")


def _require_same_dtype(*arrays):
    dt = arrays[0].dtype
    for a in arrays[1:]:
        if a is not None and a.dtype != dt:
            raise ShapeError(f"dtype mismatch: {a.dtype} vs {dt}")
    return dt


# ---------------------------------------------------------------------------
# raw ndarray kernels (shared with the autodiff wrappers)
# ---------------------------------------------------------------------------

def _pad_zero_raw(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    if top == bottom == left == right == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))


def _conv_out_size(n_in: int, pad_a: int, pad_b: int, k: int, stride: int) -> int:
    return (n_in + pad_a + pad_b - k) // stride + 1


def _im2col(xpad: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C, kh, kw, OH, OW) by strided slicing per tap."""
    n, c, hp, wp = xpad.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    col = np.empty((n, c, kh, kw, oh, ow), dtype=xpad.dtype)
    for y in range(kh):
        y_max = y + stride * oh
        for x in range(kw):
            x_max = x + stride * ow
            col[:, :, y, x] = xpad[:, :, y:y_max:stride, x:x_max:stride]
    return col


def _col2im(gcol: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add taps back into the padded grid."""
    n, c, kh, kw, oh, ow = gcol.shape
    gx = np.zeros((n, c, hp, wp), dtype=gcol.dtype)
    for y in range(kh):
        y_max = y + stride * oh
        for x in range(kw):
            x_max = x + stride * ow
            gx[:, :, y:y_max:stride, x:x_max:stride] += gcol[:, :, y, x]
    return gx


def _partial_ratio(h: int, w: int, kh: int, kw: int, stride: int,
                   pads: tuple[int, int, int, int], dtype) -> np.ndarray:
    """Per-output (full taps / in-bounds taps); 1 where the window fits."""
    top, bottom, left, right = pads
    oh = _conv_out_size(h, top, bottom, kh, stride)
    ow = _conv_out_size(w, left, right, kw, stride)
    rows = np.arange(oh) * stride - top
    cols = np.arange(ow) * stride - left
    count_h = np.minimum(rows + kh, h) - np.maximum(rows, 0)
    count_w = np.minimum(cols + kw, w) - np.maximum(cols, 0)
    counts = np.outer(np.clip(count_h, 0, None), np.clip(count_w, 0, None)).astype(dtype)
    full = dtype.type(kh * kw)
    with np.errstate(divide="ignore"):
        ratio = np.where(counts > 0, full / counts, counts)
    return ratio.astype(dtype)


_COL_BUDGET = 48_000_000  # floats; above this the no-grad path chunks rows


def _conv2d_raw(x: np.ndarray, w: np.ndarray, bias, stride: int,
                pads: tuple[int, int, int, int], partial: bool,
                return_col: bool = False):
    """Cross-correlation on raw arrays. Optionally returns the im2col buffer
    and the partial ratio so the backward pass can reuse them. When the
    buffer is not needed and would be large, output rows are processed in
    chunks to bound memory."""
    n, cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    xpad = _pad_zero_raw(x, *pads)
    oh = (xpad.shape[2] - kh) // stride + 1
    ow = (xpad.shape[3] - kw) // stride + 1
    w2 = w.reshape(cout, cin * kh * kw)
    col_floats = n * cin * kh * kw * oh * ow
    col = None
    if return_col or col_floats <= _COL_BUDGET:
        col = _im2col(xpad, kh, kw, stride)  # (N, Cin, kh, kw, OH, OW)
        col2 = col.reshape(n, cin * kh * kw, oh * ow)
        out = np.matmul(w2[None], col2).reshape(n, cout, oh, ow)
    else:
        out = np.empty((n, cout, oh, ow), dtype=x.dtype)
        rows_per_chunk = max(1, _COL_BUDGET // (n * cin * kh * kw * ow))
        for r0 in range(0, oh, rows_per_chunk):
            r1 = min(r0 + rows_per_chunk, oh)
            sl = xpad[:, :, r0 * stride:(r1 - 1) * stride + kh, :]
            ccol = _im2col(sl, kh, kw, stride)
            ccol2 = ccol.reshape(n, cin * kh * kw, (r1 - r0) * ow)
            out[:, :, r0:r1, :] = np.matmul(w2[None], ccol2).reshape(
                n, cout, r1 - r0, ow)
    ratio = None
    if partial:
        ratio = _partial_ratio(h, wd, kh, kw, stride, pads, x.dtype)
        out = out * ratio
    if bias is not None:
        out = out + bias.reshape(1, cout, 1, 1)
    if return_col:
        return out, col, ratio
    return out


def _transposed_conv2d_raw(x: np.ndarray, f: np.ndarray, bias) -> np.ndarray:
    """Stride-1 transposed conv: out[n,co,i+di,j+dj] += x[n,ci,i,j]*f[ci,co,di,dj].

    Implemented as a full cross-correlation of the zero-padded input with the
    spatially flipped, channel-swapped filter.
    """
    cin, cout, kh, kw = f.shape
    xpad = _pad_zero_raw(x, kh - 1, kh - 1, kw - 1, kw - 1)
    wflip = f[:, :, ::-1, ::-1].swapaxes(0, 1)  # (Cout, Cin, kh, kw)
    return _conv2d_raw(xpad, np.ascontiguousarray(wflip), bias, 1, (0, 0, 0, 0), False)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-interpolation matrix for half-pixel-center bilinear resampling."""
    src = (np.arange(n_out, dtype=F64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    m = np.zeros((n_out, n_in), dtype=F64)
    np.add.at(m, (np.arange(n_out), i0), 1.0 - t)
    np.add.at(m, (np.arange(n_out), i1), t)
    return m.astype(dtype)


def _bilinear_raw(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    mh = _interp_matrix(x.shape[2], out_h, x.dtype)
    mw = _interp_matrix(x.shape[3], out_w, x.dtype)
    y = np.tensordot(x, mh, axes=([2], [1]))     # (N, C, W, OH)
    y = np.tensordot(y, mw, axes=([2], [1]))     # (N, C, OH, OW)
    return np.ascontiguousarray(y)


# ---------------------------------------------------------------------------
# public kernels on Tensor
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: np.ndarray | None, spec: ConvSpec) -> Tensor:
    """Cross-correlate ``x`` [N,Cin,H,W] with ``w`` [Cout,Cin,Kh,Kw].

    With partial padding the output is ratio-scaled before the bias is added.
    """
    _require_nonempty(x, w)
    _require_same_dtype(x.data, w.data, bias)
    if spec.stride < 1:
        raise ShapeError(f"stride must be >= 1, got {spec.stride}")
    cout, cin, kh, kw = w.dims
    if cin != x.c:
        raise ShapeError(f"filter expects {cin} input channels, tensor has {x.c}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    pads = spec.padding.extent()
    if x.h + pads[0] + pads[1] < kh or x.w + pads[2] + pads[3] < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} does not fit padded input {x.h + pads[0] + pads[1]}"
            f"x{x.w + pads[2] + pads[3]}")
    partial = spec.padding.mode == "partial"
    out = _conv2d_raw(x.data, w.data, bias, spec.stride, pads, partial)
    return Tensor(out)


def transposed_conv2d(x: Tensor, f: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Stride-1, unpadded transposed convolution; output grows by K-1 per axis."""
    _require_nonempty(x, f)
    _require_same_dtype(x.data, f.data, bias)
    cin, cout, kh, kw = f.dims
    if cin != x.c:
        raise ShapeError(f"filter expects {cin} input channels, tensor has {x.c}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    return Tensor(_transposed_conv2d_raw(x.data, f.data, bias))


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample with half-pixel source centers, clamped at borders."""
    _require_nonempty(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be >= 1, got {out_h}x{out_w}")
    return Tensor(_bilinear_raw(x.data, out_h, out_w))


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    return bilinear_upsample(x, 2 * x.h, 2 * x.w)


def avg_pool_global(x: Tensor) -> Tensor:
    """Mean over the spatial dims per channel -> [N,C,1,1]."""
    _require_nonempty(x)
    return Tensor(x.data.mean(axis=(2, 3), keepdims=True, dtype=x.dtype))


@dataclass
class RunningStats:
    """Per-channel running mean/var for batch norm; mutated by train mode."""

    mean: np.ndarray
    var: np.ndarray

    @staticmethod
    def fresh(c: int, dtype=F32) -> "RunningStats":
        return RunningStats(np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype))


def _batch_norm_raw(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                    stats: RunningStats, train: bool, momentum: float, eps: float,
                    return_saved: bool = False):
    n, c, h, w = x.shape
    if train:
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError(f"train-mode batch norm needs N*H*W >= 2, got {m}")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        # biased variance normalizes; unbiased updates the running estimate
        stats.mean = ((1.0 - momentum) * stats.mean + momentum * mu).astype(x.dtype)
        var_unbiased = var * (m / (m - 1))
        stats.var = ((1.0 - momentum) * stats.var + momentum * var_unbiased).astype(x.dtype)
    else:
        mu = stats.mean.astype(x.dtype)
        var = stats.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.reshape(1, c, 1, 1) * xhat + beta.reshape(1, c, 1, 1)
    if return_saved:
        return out.astype(x.dtype), xhat, inv_std
    return out.astype(x.dtype)


def batch_norm(x: Tensor, gamma: np.ndarray, beta: np.ndarray, stats: RunningStats,
               train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Single-process batch norm. Train mode uses batch statistics over
    (N,H,W) and updates ``stats`` in place; eval mode uses ``stats``."""
    _require_nonempty(x)
    if gamma.shape != (x.c,) or beta.shape != (x.c,):
        raise ShapeError(f"gamma/beta must have shape ({x.c},)")
    return Tensor(_batch_norm_raw(x.data, gamma, beta, stats, train, momentum, eps))


def relu(x: Tensor) -> Tensor:
    _require_nonempty(x)
    return Tensor(np.maximum(x.data, 0))


def center_crop(x: Tensor, ch: int, cw: int) -> Tensor:
    """Crop anchored at (floor((H-ch)/2), floor((W-cw)/2))."""
    _require_nonempty(x)
    if ch > x.h or cw > x.w:
        raise ShapeError(f"crop {ch}x{cw} larger than input {x.h}x{x.w}")
    top = (x.h - ch) // 2
    left = (x.w - cw) // 2
    return Tensor(x.data[:, :, top:top + ch, left:left + cw])


def random_crop(x: Tensor, ch: int, cw: int,
                rng: np.random.Generator) -> tuple[Tensor, tuple[int, int]]:
    """Uniform random crop; returns the anchor for reproducibility."""
    _require_nonempty(x)
    if ch > x.h or cw > x.w:
        raise ShapeError(f"crop {ch}x{cw} larger than input {x.h}x{x.w}")
    top = int(rng.integers(0, x.h - ch + 1))
    left = int(rng.integers(0, x.w - cw + 1))
    return Tensor(x.data[:, :, top:top + ch, left:left + cw]), (top, left)
