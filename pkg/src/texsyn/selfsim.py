"""Self-similarity maps of encoded feature maps.

For a feature map F of spatial size HxW, the map holds one score per integer
shift (p, q) with p in [-H/2, H/2] and q in [-W/2, W/2], laid out on an
(H+1)x(W+1) grid with the zero shift at the center. Each score is

    s(p, q) = - sum_{m,n,c} (F(m,n) - F(m-p,n-q))^2 / sum_{m,n,c} F(m,n)^2

where (m, n) ranges over the overlap between the shifted and unshifted
copies (half-open intervals [max(0,p), min(p+H,H)) x [max(0,q), min(q+W,W))).
The normalization makes the score independent of the scale of F; s(0,0) is 0
and every other score is <= 0. The map is generally not symmetric about its
center because the denominator follows the unshifted copy.

``selfsim_naive`` evaluates the double loop directly and serves as the
oracle. ``selfsim_fast`` expands the squared difference into A - 2B + D and
computes each term with a convolution:

    A(p,q) = sum F(m,n)^2      zero-padded channel-summed F^2, all-ones filter
    B(p,q) = sum F(m,n)F(m-p,n-q)   zero-padded F as input, F itself as filter
    D(p,q) = sum F(m-p,n-q)^2  center-support indicator as input, F^2 as filter

A guard epsilon protects the division, scores are forced to 0 where the
overlap of F is identically zero, and the fast path clamps at 0 so rounding
noise can never produce a positive score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .tensor import ShapeError, Tensor

GUARD_EPS = 1e-8

SIM_CHANNELS = 8  # hidden width of the learned post-transform


@dataclass(frozen=True)
class SelfSimMap:
    """Shift-score grid plus the feature dims it was computed from."""

    scores: Tensor  # [N, 1, H+1, W+1]
    source_dims: tuple[int, int]


@dataclass
class SimTransformParams:
    """Learned two-conv transform applied to a map before expansion."""

    conv1_weight: np.ndarray  # [8, 1, 3, 3]
    conv1_bias: np.ndarray    # [8]
    conv2_weight: np.ndarray  # [1, 8, 3, 3]
    conv2_bias: np.ndarray    # [1]


def _check_even(h: int, w: int):
    if h % 2 or w % 2:
        raise ShapeError(f"self-similarity needs even spatial dims, got {h}x{w}")
    if h < 2 or w < 2:
        raise ShapeError(f"feature map too small for self-similarity: {h}x{w}")


def selfsim_naive(f: Tensor) -> SelfSimMap:
    """Direct evaluation of the score formula, one shift at a time."""
    n, c, h, w = f.dims
    _check_even(h, w)
    x = f.data.astype(np.float64)
    scores = np.zeros((n, 1, h + 1, w + 1), dtype=np.float64)
    for p in range(-h // 2, h // 2 + 1):
        m0, m1 = max(0, p), min(p + h, h)
        for q in range(-w // 2, w // 2 + 1):
            n0, n1 = max(0, q), min(q + w, w)
            base = x[:, :, m0:m1, n0:n1]
            shifted = x[:, :, m0 - p:m1 - p, n0 - q:n1 - q]
            num = ((base - shifted) ** 2).sum(axis=(1, 2, 3))
            den = (base ** 2).sum(axis=(1, 2, 3))
            val = np.where(den > 0, -num / (den + GUARD_EPS), 0.0)
            scores[:, 0, p + h // 2, q + w // 2] = val
    return SelfSimMap(Tensor(scores, dtype=f.dtype), (h, w))


def selfsim_fast_t(tape: Tape, f: Var) -> Var:
    """Convolution-decomposed scores on the tape (differentiable)."""
    n, c, h, w = f.value.shape
    _check_even(h, w)
    hh, hw = h // 2, w // 2
    dtype = f.value.dtype

    f2 = ad.square(f)
    f2sum = ad.sum_channels(f2)                       # [N,1,H,W]
    a = ad.corr_map_items(ad.pad_zero(f2sum, hh, hh, hw, hw),
                          np.ones((n, 1, h, w), dtype=dtype))
    b = ad.corr_map_items(ad.pad_zero(f, hh, hh, hw, hw), f)
    indicator = np.zeros((n, 1, 2 * h, 2 * w), dtype=dtype)
    indicator[:, :, hh:hh + h, hw:hw + w] = 1.0
    d = ad.corr_map_items(indicator, f2sum)

    num = ad.sub(ad.add(a, d), ad.scale(b, 2.0))
    s = ad.neg(ad.div(num, ad.add_const(a, GUARD_EPS)))
    mask = (a.value > 0).astype(dtype)                # no-evidence shifts score 0
    # the zero-shift score is identically 0 with an identically-zero gradient
    # (the A - 2B + D derivative cancels exactly there); pinning it removes
    # the rounding skew between the three convolution paths
    mask[:, :, hh, hw] = 0.0
    s = ad.mul_const(s, mask)
    return ad.minimum_zero(s)                         # rounding can't go positive


def selfsim_fast(f: Tensor) -> SelfSimMap:
    tape = Tape()
    s = selfsim_fast_t(tape, tape.constant(f.data))
    return SelfSimMap(Tensor(s.value), (f.h, f.w))


def sim_transform_t(tape: Tape, m: Var, w1, b1, w2, b2) -> Var:
    """conv(1->8) + ReLU + conv(8->1), spatial size preserved."""
    y = ad.conv2d(m, w1, b1, stride=1, pads=(1, 1, 1, 1), partial=True)
    y = ad.relu(y)
    return ad.conv2d(y, w2, b2, stride=1, pads=(1, 1, 1, 1), partial=True)


def selfsim_transform(m: SelfSimMap, params: SimTransformParams) -> Tensor:
    tape = Tape()
    out = sim_transform_t(tape, tape.constant(m.scores.data),
                          params.conv1_weight, params.conv1_bias,
                          params.conv2_weight, params.conv2_bias)
    return Tensor(out.value)


def selfsim_multiscale(features: list[Tensor]) -> list[SelfSimMap]:
    """One map per feature scale (expected order: 1/4, 1/8, 1/16)."""
    return [selfsim_fast(f) for f in features]
