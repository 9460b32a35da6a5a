"""Reverse-mode differentiation over the kernel set, on an append-only tape.

Ops here mirror the forward kernels in ``tensor`` but operate on ``Var``
handles recorded on a ``Tape``. Recording is define-by-run: node indices are
topologically ordered by construction, and ``Tape.backward`` visits nodes
exactly once in reverse index order, accumulating (summing) gradients at
leaves that fan out. After a backward pass the tape is finalized; recording
onto it or running backward again raises ``StaleTapeError``.

Three per-item primitives carry the data-dependent-filter machinery: a
feature map acts as the filter of a transposed convolution (``expand_items``)
or of a correlation (``corr_map_items`` / ``corr_chan_items``). Their
vector-Jacobian products are each other, which keeps the whole set closed:

    expand_items(s, F):    g_s = corr_map_items(g, F);  g_F = corr_chan_items(g, s)
    corr_map_items(x, f):  g_x = expand_items(g, f);    g_f = corr_chan_items(x, g)
    corr_chan_items(x, k): g_x = expand_items(k, g);    g_k = corr_map_items(x, g)

ReLU uses subgradient 0 at 0. Train-mode batch norm differentiates through
the batch statistics; eval mode is treated as a per-channel affine map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    F64,
    NumericError,
    RunningStats,
    ShapeError,
    _batch_norm_raw,
    _bilinear_raw,
    _col2im,
    _conv2d_raw,
    _interp_matrix,
    _pad_zero_raw,
    _partial_ratio,
    _transposed_conv2d_raw,
)


class StaleTapeError(RuntimeError):
    """Recording on, or re-running backward over, an already-consumed tape."""


class _Node:
    __slots__ = ("parents", "backward_fn", "is_leaf")

    def __init__(self, parents, backward_fn, is_leaf=False):
        self.parents = parents
        self.backward_fn = backward_fn
        self.is_leaf = is_leaf


class Var:
    """A value recorded on a tape. ``grad`` is available after backward."""

    __slots__ = ("tape", "idx", "value", "needs_grad")

    def __init__(self, tape, idx, value, needs_grad):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.needs_grad = needs_grad

    @property
    def grad(self):
        return self.tape._grads.get(self.idx)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={np.shape(self.value)})"


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._grads: dict[int, np.ndarray] = {}
        self._finalized = False

    def _append(self, value, parents, backward_fn, needs_grad, is_leaf=False) -> Var:
        if self._finalized:
            raise StaleTapeError("tape already consumed by backward(); record on a fresh tape")
        idx = len(self.nodes)
        self.nodes.append(_Node(tuple(p.idx for p in parents), backward_fn, is_leaf))
        return Var(self, idx, value, needs_grad)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        value = np.asarray(value)
        return self._append(value, (), None, requires_grad, is_leaf=requires_grad)

    def constant(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def backward(self, root: Var, seed=None) -> None:
        """Propagate ``seed`` (default: all-ones) from ``root`` to the leaves."""
        if self._finalized:
            raise StaleTapeError("backward() already ran on this tape")
        if root.tape is not self:
            raise ShapeError("root belongs to a different tape")
        if seed is None:
            seed = np.ones_like(root.value)
        else:
            seed = np.asarray(seed, dtype=root.value.dtype)
            if seed.shape != np.shape(root.value):
                raise ShapeError(
                    f"seed shape {seed.shape} != output shape {np.shape(root.value)}")
        self._finalized = True
        self._grads[root.idx] = seed
        for idx in range(root.idx, -1, -1):
            node = self.nodes[idx]
            if node.is_leaf or node.backward_fn is None:
                continue
            g = self._grads.pop(idx, None)
            if g is None:
                continue
            for pidx, pgrad in zip(node.parents, node.backward_fn(g)):
                if pgrad is None:
                    continue
                if pidx in self._grads:
                    self._grads[pidx] = self._grads[pidx] + pgrad
                else:
                    self._grads[pidx] = pgrad
        # drop grads held by interior nodes above the root
        for idx in [i for i in self._grads if not self.nodes[i].is_leaf]:
            del self._grads[idx]


def _as_var(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ShapeError("mixing vars from different tapes")
        return x
    return tape.constant(np.asarray(x))


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise ShapeError("at least one argument must be a Var")


def _record(tape, value, parents, make_backward):
    needs = any(p.needs_grad for p in parents)
    fn = make_backward() if needs else None
    out = tape._append(value, parents, fn, needs)
    return out


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)
    if np.shape(a.value) != np.shape(b.value):
        raise ShapeError(f"add shape mismatch {np.shape(a.value)} vs {np.shape(b.value)}")
    return _record(tape, a.value + b.value, (a, b), lambda: lambda g: (g, g))


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)
    if np.shape(a.value) != np.shape(b.value):
        raise ShapeError(f"sub shape mismatch {np.shape(a.value)} vs {np.shape(b.value)}")
    return _record(tape, a.value - b.value, (a, b), lambda: lambda g: (g, -g))


def neg(a: Var) -> Var:
    return _record(a.tape, -a.value, (a,), lambda: lambda g: (-g,))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)
    av, bv = a.value, b.value
    return _record(tape, av * bv, (a, b), lambda: lambda g: (g * bv, g * av))


def div(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)
    av, bv = a.value, b.value
    out = av / bv
    return _record(tape, out, (a, b), lambda: lambda g: (g / bv, -g * out / bv))


def scale(a: Var, k: float) -> Var:
    return _record(a.tape, a.value * k, (a,), lambda: lambda g: (g * k,))


def add_const(a: Var, k: float) -> Var:
    return _record(a.tape, a.value + k, (a,), lambda: lambda g: (g,))


def mul_const(a: Var, c: np.ndarray) -> Var:
    return _record(a.tape, a.value * c, (a,), lambda: lambda g: (g * c,))


def square(a: Var) -> Var:
    av = a.value
    return _record(a.tape, av * av, (a,), lambda: lambda g: (2.0 * g * av,))


def abs_(a: Var) -> Var:
    sign = np.sign(a.value)
    return _record(a.tape, np.abs(a.value), (a,), lambda: lambda g: (g * sign,))


def sum_all(a: Var) -> Var:
    shape = np.shape(a.value)
    dtype = a.value.dtype

    def mk():
        return lambda g: (np.broadcast_to(np.asarray(g, dtype=dtype), shape).copy(),)

    return _record(a.tape, np.asarray(a.value.sum(), dtype=dtype)[()], (a,), mk)


def mean_all(a: Var) -> Var:
    n = a.value.size
    return scale(sum_all(a), 1.0 / n)


def sum_channels(a: Var) -> Var:
    """Sum over the channel axis, keeping it (rank-4 input)."""
    c = a.value.shape[1]

    def mk():
        return lambda g: (np.repeat(g, c, axis=1),)

    return _record(a.tape, a.value.sum(axis=1, keepdims=True), (a,), mk)


def relu(a: Var) -> Var:
    mask = a.value > 0

    def mk():
        return lambda g: (g * mask,)

    return _record(a.tape, np.maximum(a.value, 0), (a,), mk)


def leaky_relu(a: Var, slope: float = 0.2) -> Var:
    coef = np.where(a.value > 0, a.value.dtype.type(1.0), a.value.dtype.type(slope))

    def mk():
        return lambda g: (g * coef,)

    return _record(a.tape, a.value * coef, (a,), mk)


def minimum_zero(a: Var) -> Var:
    """min(a, 0); gradient passes wherever a <= 0."""
    mask = a.value <= 0

    def mk():
        return lambda g: (g * mask,)

    return _record(a.tape, np.minimum(a.value, 0), (a,), mk)


def reshape(a: Var, shape) -> Var:
    old = np.shape(a.value)

    def mk():
        return lambda g: (g.reshape(old),)

    return _record(a.tape, a.value.reshape(shape), (a,), mk)


def concat_channels(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)
    ca = a.value.shape[1]

    def mk():
        return lambda g: (g[:, :ca], g[:, ca:])

    return _record(tape, np.concatenate([a.value, b.value], axis=1), (a, b), mk)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def pad_zero(a: Var, top: int, bottom: int, left: int, right: int) -> Var:
    h, w = a.value.shape[2], a.value.shape[3]

    def mk():
        return lambda g: (g[:, :, top:top + h, left:left + w],)

    return _record(a.tape, _pad_zero_raw(a.value, top, bottom, left, right), (a,), mk)


def crop_at(a: Var, top: int, left: int, ch: int, cw: int) -> Var:
    n, c, h, w = a.value.shape
    if top + ch > h or left + cw > w:
        raise ShapeError(f"crop [{top}:{top+ch}, {left}:{left+cw}] exceeds {h}x{w}")

    def mk():
        def back(g):
            gx = np.zeros((n, c, h, w), dtype=g.dtype)
            gx[:, :, top:top + ch, left:left + cw] = g
            return (gx,)
        return back

    return _record(a.tape, np.ascontiguousarray(a.value[:, :, top:top + ch, left:left + cw]),
                   (a,), mk)


def center_crop(a: Var, ch: int, cw: int) -> Var:
    h, w = a.value.shape[2], a.value.shape[3]
    if ch > h or cw > w:
        raise ShapeError(f"crop {ch}x{cw} larger than input {h}x{w}")
    return crop_at(a, (h - ch) // 2, (w - cw) // 2, ch, cw)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

def conv2d(x, w, bias=None, *, stride: int = 1,
           pads: tuple[int, int, int, int] = (0, 0, 0, 0), partial: bool = False) -> Var:
    tape = _tape_of(x, w, bias)
    x, w = _as_var(tape, x), _as_var(tape, w)
    bias = _as_var(tape, bias) if bias is not None else None
    xv, wv = x.value, w.value
    n, cin, h, wd = xv.shape
    cout, cin2, kh, kw = wv.shape
    if cin2 != cin:
        raise ShapeError(f"filter expects {cin2} input channels, tensor has {cin}")
    if w.needs_grad:
        out, col, ratio = _conv2d_raw(xv, wv, bias.value if bias else None,
                                      stride, pads, partial, return_col=True)
    else:
        # the im2col buffer is only needed for the filter gradient; skipping
        # it lets large no-grad convolutions run row-chunked
        out = _conv2d_raw(xv, wv, bias.value if bias else None, stride, pads, partial)
        col = None
        ratio = _partial_ratio(xv.shape[2], xv.shape[3], kh, kw, stride, pads,
                               xv.dtype) if partial else None
    parents = (x, w) if bias is None else (x, w, bias)

    def mk():
        hp, wp = h + pads[0] + pads[1], wd + pads[2] + pads[3]
        w2 = wv.reshape(cout, cin * kh * kw)

        def back(g):
            oh, ow = g.shape[2], g.shape[3]
            gres = g * ratio if partial else g
            gres2 = gres.reshape(n, cout, oh * ow)
            gx = gw = gb = None
            if x.needs_grad:
                gcol2 = np.matmul(w2.T[None], gres2)
                gcol = gcol2.reshape(n, cin, kh, kw, oh, ow)
                gxpad = _col2im(gcol, hp, wp, stride)
                gx = np.ascontiguousarray(
                    gxpad[:, :, pads[0]:pads[0] + h, pads[2]:pads[2] + wd])
            if w.needs_grad:
                col2 = col.reshape(n, cin * kh * kw, oh * ow)
                gw = np.matmul(gres2, col2.transpose(0, 2, 1)).sum(axis=0)
                gw = gw.reshape(cout, cin, kh, kw)
            if bias is not None and bias.needs_grad:
                gb = g.sum(axis=(0, 2, 3))
            grads = [gx, gw]
            if bias is not None:
                grads.append(gb)
            return tuple(grads)

        return back

    return _record(tape, out, parents, mk)


def transposed_conv2d(x, f, bias=None) -> Var:
    """Stride-1 transposed conv with a shared (batch-independent) filter."""
    tape = _tape_of(x, f, bias)
    x, f = _as_var(tape, x), _as_var(tape, f)
    bias = _as_var(tape, bias) if bias is not None else None
    xv, fv = x.value, f.value
    cin, cout, kh, kw = fv.shape
    if xv.shape[1] != cin:
        raise ShapeError(f"filter expects {cin} input channels, tensor has {xv.shape[1]}")
    out = _transposed_conv2d_raw(xv, fv, bias.value if bias else None)
    parents = (x, f) if bias is None else (x, f, bias)

    def mk():
        hi, wi = xv.shape[2], xv.shape[3]

        def back(g):
            gx = gf = gb = None
            if x.needs_grad:
                gx = _conv2d_raw(g, fv, None, 1, (0, 0, 0, 0), False)
            if f.needs_grad:
                win = sliding_window_view(g, (hi, wi), axis=(2, 3))
                # win: (N, Cout, Kh, Kw, Hi, Wi)
                gf = np.einsum("naij,nbuvij->abuv", xv, win)
            if bias is not None and bias.needs_grad:
                gb = g.sum(axis=(0, 2, 3))
            grads = [gx, gf]
            if bias is not None:
                grads.append(gb)
            return tuple(grads)

        return back

    return _record(tape, out, parents, mk)


# ---------------------------------------------------------------------------
# per-item (data-dependent filter) primitives
# ---------------------------------------------------------------------------

_CHUNK_BUDGET = 4_000_000  # floats per window-copy chunk


def _row_chunks(rows: int, per_row: int):
    step = max(1, _CHUNK_BUDGET // max(1, per_row))
    for start in range(0, rows, step):
        yield start, min(start + step, rows)


def _expand_items_raw(s: np.ndarray, f: np.ndarray) -> np.ndarray:
    """out[n,c,i+p,j+q] += s[n,0,i,j] * f[n,c,p,q]; full correlation form."""
    n, _, hs, ws = s.shape
    _, c, hf, wf = f.shape
    ho, wo = hs + hf - 1, ws + wf - 1
    spad = _pad_zero_raw(s, hf - 1, hf - 1, wf - 1, wf - 1)
    out = np.empty((n, c, ho, wo), dtype=s.dtype)
    for i in range(n):
        f2 = f[i, :, ::-1, ::-1].reshape(c, hf * wf)
        win = sliding_window_view(spad[i, 0], (hf, wf))  # (ho, wo, hf, wf) view
        for r0, r1 in _row_chunks(ho, wo * hf * wf):
            wm = win[r0:r1].reshape((r1 - r0) * wo, hf * wf)
            out[i, :, r0:r1, :] = (wm @ f2.T).T.reshape(c, r1 - r0, wo)
    return out


def _corr_map_items_raw(x: np.ndarray, f: np.ndarray) -> np.ndarray:
    """out[n,0,a,b] = sum_{c,u,v} x[n,c,a+u,b+v] * f[n,c,u,v] (valid)."""
    n, c, hx, wx = x.shape
    _, cf, hf, wf = f.shape
    if cf != c:
        raise ShapeError(f"channel mismatch {cf} vs {c}")
    ho, wo = hx - hf + 1, wx - wf + 1
    out = np.empty((n, 1, ho, wo), dtype=x.dtype)
    for i in range(n):
        f2 = f[i].reshape(c * hf * wf)
        win = sliding_window_view(x[i], (hf, wf), axis=(1, 2))  # (c, ho, wo, hf, wf)
        for r0, r1 in _row_chunks(ho, wo * c * hf * wf):
            wm = win[:, r0:r1].transpose(1, 2, 0, 3, 4).reshape((r1 - r0) * wo, c * hf * wf)
            out[i, 0, r0:r1, :] = (wm @ f2).reshape(r1 - r0, wo)
    return out


def _corr_chan_items_raw(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """out[n,c,a,b] = sum_{u,v} x[n,c,a+u,b+v] * k[n,0,u,v] (valid, per channel)."""
    n, c, hx, wx = x.shape
    _, _, hk, wk = k.shape
    ho, wo = hx - hk + 1, wx - wk + 1
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    for i in range(n):
        k2 = k[i, 0].reshape(hk * wk)
        win = sliding_window_view(x[i], (hk, wk), axis=(1, 2))  # (c, ho, wo, hk, wk)
        for r0, r1 in _row_chunks(ho, wo * c * hk * wk):
            wm = win[:, r0:r1].reshape(c * (r1 - r0) * wo, hk * wk)
            out[i, :, r0:r1, :] = (wm @ k2).reshape(c, r1 - r0, wo)
    return out


def expand_items(s, f) -> Var:
    """Per-item transposed conv: each item's feature map is its own filter."""
    tape = _tape_of(s, f)
    s, f = _as_var(tape, s), _as_var(tape, f)
    sv, fv = s.value, f.value
    if sv.shape[0] != fv.shape[0]:
        raise ShapeError(f"batch mismatch {sv.shape[0]} vs {fv.shape[0]}")
    if sv.shape[1] != 1:
        raise ShapeError(f"shift-map input must have 1 channel, got {sv.shape[1]}")
    out = _expand_items_raw(sv, fv)

    def mk():
        def back(g):
            gs = _corr_map_items_raw(g, fv) if s.needs_grad else None
            gf = _corr_chan_items_raw(g, sv) if f.needs_grad else None
            return (gs, gf)
        return back

    return _record(tape, out, (s, f), mk)


def corr_map_items(x, f) -> Var:
    """Per-item valid correlation against a per-item filter, reduced to 1 channel."""
    tape = _tape_of(x, f)
    x, f = _as_var(tape, x), _as_var(tape, f)
    xv, fv = x.value, f.value
    out = _corr_map_items_raw(xv, fv)

    def mk():
        def back(g):
            gx = _expand_items_raw(g, fv) if x.needs_grad else None
            gf = _corr_chan_items_raw(xv, g) if f.needs_grad else None
            return (gx, gf)
        return back

    return _record(tape, out, (x, f), mk)


def corr_chan_items(x, k) -> Var:
    """Per-item, per-channel valid correlation with a single-channel kernel."""
    tape = _tape_of(x, k)
    x, k = _as_var(tape, x), _as_var(tape, k)
    xv, kv = x.value, k.value
    out = _corr_chan_items_raw(xv, kv)

    def mk():
        def back(g):
            gx = _expand_items_raw(kv, g) if x.needs_grad else None
            gk = _corr_map_items_raw(xv, g) if k.needs_grad else None
            return (gx, gk)
        return back

    return _record(tape, out, (x, k), mk)


# ---------------------------------------------------------------------------
# resampling, pooling, normalization
# ---------------------------------------------------------------------------

def bilinear_upsample(x: Var, out_h: int, out_w: int) -> Var:
    xv = x.value

    def mk():
        mh = _interp_matrix(xv.shape[2], out_h, xv.dtype)
        mw = _interp_matrix(xv.shape[3], out_w, xv.dtype)

        def back(g):
            gy = np.tensordot(g, mh, axes=([2], [0]))   # (N, C, OW, H)
            gy = np.tensordot(gy, mw, axes=([2], [0]))  # (N, C, H, W)
            return (np.ascontiguousarray(gy),)

        return back

    return _record(x.tape, _bilinear_raw(xv, out_h, out_w), (x,), mk)


def avg_pool_global(x: Var) -> Var:
    n, c, h, w = x.value.shape

    def mk():
        def back(g):
            return (np.broadcast_to(g / (h * w), (n, c, h, w)).copy(),)
        return back

    return _record(x.tape, x.value.mean(axis=(2, 3), keepdims=True), (x,), mk)


def add_channel_bias(x, v) -> Var:
    """x[N,C,H,W] + v[N,C] broadcast over the spatial dims."""
    tape = _tape_of(x, v)
    x, v = _as_var(tape, x), _as_var(tape, v)
    out = x.value + v.value[:, :, None, None]

    def mk():
        return lambda g: (g, g.sum(axis=(2, 3)))

    return _record(tape, out, (x, v), mk)


def linear(x, w, b) -> Var:
    """x[N,Cin] @ w[Cout,Cin]^T + b[Cout]."""
    tape = _tape_of(x, w, b)
    x, w, b = _as_var(tape, x), _as_var(tape, w), _as_var(tape, b)
    xv, wv = x.value, w.value
    out = xv @ wv.T + b.value

    def mk():
        def back(g):
            gx = g @ wv if x.needs_grad else None
            gw = g.T @ xv if w.needs_grad else None
            gb = g.sum(axis=0) if b.needs_grad else None
            return (gx, gw, gb)
        return back

    return _record(tape, out, (x, w, b), mk)


def batch_norm(x, gamma, beta, stats: RunningStats, *, train: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Var:
    tape = _tape_of(x, gamma, beta)
    x, gamma, beta = _as_var(tape, x), _as_var(tape, gamma), _as_var(tape, beta)
    out, xhat, inv_std = _batch_norm_raw(x.value, gamma.value, beta.value, stats,
                                         train, momentum, eps, return_saved=True)
    n, c, h, w = x.value.shape
    gv = gamma.value

    def mk():
        def back(g):
            ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.needs_grad else None
            gbeta = g.sum(axis=(0, 2, 3)) if beta.needs_grad else None
            gx = None
            if x.needs_grad:
                coef = (gv * inv_std).reshape(1, c, 1, 1)
                if train:
                    m = n * h * w
                    gsum = g.sum(axis=(0, 2, 3), keepdims=True)
                    gxhat_sum = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    gx = coef / m * (m * g - gsum - xhat * gxhat_sum)
                else:
                    gx = g * coef
            return (gx, ggamma, gbeta)
        return back

    return _record(tape, out, (x, gamma, beta), mk)


# ---------------------------------------------------------------------------
# gram matrix
# ---------------------------------------------------------------------------

def gram(psi: Var) -> Var:
    """Channel inner products per item: [N,C,H,W] -> [N,C,C]."""
    pv = psi.value
    n, c, h, w = pv.shape
    flat = pv.reshape(n, c, h * w)
    out = np.matmul(flat, flat.transpose(0, 2, 1))

    def mk():
        def back(g):
            gsym = g + g.transpose(0, 2, 1)
            gp = np.matmul(gsym, flat).reshape(n, c, h, w)
            return (gp,)
        return back

    return _record(psi.tape, out, (psi,), mk)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Max relative error per checked parameter, against central differences."""

    per_param: dict[str, float]
    step: float
    tol: float
    passed: bool

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(f, params: dict[str, np.ndarray], *, step: float = 1e-3,
               tol: float = 1e-4, rng: np.random.Generator | None = None,
               coords_per_param: int = 64) -> GradCheckReport:
    """Compare tape gradients of a scalar function against central differences.

    ``f(tape, leaves)`` must build and return a scalar Var from the dict of
    leaf Vars. Everything runs in float64. For tensors larger than
    ``coords_per_param`` a random subset of coordinates is probed.
    """
    rng = rng or np.random.default_rng(0)
    p64 = {k: np.asarray(v, dtype=F64) for k, v in params.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in p64.items()}
    y = f(tape, leaves)
    if np.shape(y.value) != ():
        raise ShapeError(f"grad_check needs a scalar output, got shape {np.shape(y.value)}")
    if not np.isfinite(y.value):
        raise NumericError("non-finite value in grad_check forward pass")
    tape.backward(y)
    analytic = {k: (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(v))
                for k, v in p64.items()}

    def eval_at(trial: dict[str, np.ndarray]) -> float:
        t = Tape()
        out = f(t, {k: t.constant(v) for k, v in trial.items()})
        val = float(out.value)
        if not np.isfinite(val):
            raise NumericError("non-finite value in grad_check probe")
        return val

    per_param: dict[str, float] = {}
    for name, base in p64.items():
        size = base.size
        n_coords = min(coords_per_param, size)
        coords = rng.choice(size, size=n_coords, replace=False) if size > n_coords \
            else np.arange(size)
        worst = 0.0
        for c in coords:
            bumped = dict(p64)
            plus = base.copy().ravel()
            plus[c] += step
            bumped[name] = plus.reshape(base.shape)
            f_plus = eval_at(bumped)
            minus = base.copy().ravel()
            minus[c] -= step
            bumped[name] = minus.reshape(base.shape)
            f_minus = eval_at(bumped)
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, _rel_err(float(analytic[name].ravel()[c]), numeric))
        per_param[name] = worst
    return GradCheckReport(per_param, step, tol, all(v <= tol for v in per_param.values()))
