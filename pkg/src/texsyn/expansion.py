"""Feature map expansion: the encoded features act as the filter of a
stride-1 transposed convolution whose input is the (transformed) shift-score
map. An HxW feature map driven by an (H+1)x(W+1) map expands to exactly
2Hx2W, which is why a single self-similarity-driven pass cannot exceed that
factor; noise-mode inputs of any size follow out = in + K - 1 instead.

``paste_accumulate_reference`` is the explicit shift-paste-sum loop and is the
oracle for ``expand_via_transposed_conv``. The full block wraps the expansion
with a learned filter branch, the map transform, an avg-pool bias path, and
an output convolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .selfsim import SIM_CHANNELS, sim_transform_t
from .tensor import ShapeError, Tensor, _bilinear_raw

BLOCK_PARAM_SHAPES = {
    "filter_conv1.weight": lambda c: (c, c, 3, 3),
    "filter_conv1.bias": lambda c: (c,),
    "filter_conv2.weight": lambda c: (c, c, 3, 3),
    "filter_conv2.bias": lambda c: (c,),
    "bias_fc.weight": lambda c: (c, c),
    "bias_fc.bias": lambda c: (c,),
    "sim_conv1.weight": lambda c: (SIM_CHANNELS, 1, 3, 3),
    "sim_conv1.bias": lambda c: (SIM_CHANNELS,),
    "sim_conv2.weight": lambda c: (1, SIM_CHANNELS, 3, 3),
    "sim_conv2.bias": lambda c: (1,),
    "output_conv.weight": lambda c: (c, c, 3, 3),
    "output_conv.bias": lambda c: (c,),
}


@dataclass
class TransConvBlockParams:
    """Learnable weights for one expansion block over C-channel features."""

    tensors: dict[str, np.ndarray]
    channels: int

    @staticmethod
    def init(channels: int, rng: np.random.Generator, dtype=np.float32) -> "TransConvBlockParams":
        t = {}
        for name, shape_fn in BLOCK_PARAM_SHAPES.items():
            shape = shape_fn(channels)
            if name.endswith(".bias"):
                t[name] = np.zeros(shape, dtype=dtype)
            elif name == "bias_fc.weight":
                t[name] = (rng.standard_normal(shape) / np.sqrt(channels)).astype(dtype)
            else:
                fan_in = shape[1] * shape[2] * shape[3]
                t[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        return TransConvBlockParams(t, channels)

    def validate(self):
        for name, shape_fn in BLOCK_PARAM_SHAPES.items():
            want = shape_fn(self.channels)
            got = self.tensors[name].shape
            if got != want:
                raise ShapeError(f"block param {name}: expected {want}, got {got}")


def paste_accumulate_reference(f: Tensor, s: Tensor) -> Tensor:
    """Oracle: sum shifted copies of f weighted by the score at each shift."""
    n, c, h, w = f.dims
    sn, sc, sh, sw = s.dims
    if (sh, sw) != (h + 1, w + 1) or sc != 1 or sn != n:
        raise ShapeError(f"score map must be [{n},1,{h + 1},{w + 1}], got {s.dims}")
    if h % 2 or w % 2:
        raise ShapeError(f"feature dims must be even, got {h}x{w}")
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=np.float64)
    fd = f.data.astype(np.float64)
    sd = s.data.astype(np.float64)
    for a in range(h + 1):          # a = p + H/2
        for b in range(w + 1):      # b = q + W/2
            out[:, :, a:a + h, b:b + w] += sd[:, :, a:a + 1, b:b + 1] * fd
    return Tensor(out, dtype=f.dtype)


def expand_via_transposed_conv(f: Tensor, s: Tensor) -> Tensor:
    """Per-item transposed convolution: each item's features are its filter."""
    n, c, h, w = f.dims
    sn, sc, sh, sw = s.dims
    if sc != 1 or sn != n:
        raise ShapeError(f"score map must be [{n},1,*,*], got {s.dims}")
    tape = Tape()
    out = ad.expand_items(tape.constant(s.data), tape.constant(f.data))
    return Tensor(out.value)


def transconv_block_t(tape: Tape, encoded: Var, in_map: Var,
                      params: Mapping[str, "Var | np.ndarray"]) -> Var:
    """Full expansion block on the tape.

    filter = conv(ReLU(conv(encoded))); map = transform(in_map); the expansion
    output gets a per-channel bias from a linear map of globally pooled
    features, then an output conv + ReLU.
    """
    n, c = encoded.value.shape[0], encoded.value.shape[1]
    flt = ad.conv2d(encoded, params["filter_conv1.weight"], params["filter_conv1.bias"],
                    stride=1, pads=(1, 1, 1, 1), partial=True)
    flt = ad.relu(flt)
    flt = ad.conv2d(flt, params["filter_conv2.weight"], params["filter_conv2.bias"],
                    stride=1, pads=(1, 1, 1, 1), partial=True)

    m = sim_transform_t(tape, in_map,
                        params["sim_conv1.weight"], params["sim_conv1.bias"],
                        params["sim_conv2.weight"], params["sim_conv2.bias"])

    y = ad.expand_items(m, flt)

    pooled = ad.reshape(ad.avg_pool_global(encoded), (n, c))
    bias = ad.linear(pooled, params["bias_fc.weight"], params["bias_fc.bias"])
    y = ad.add_channel_bias(y, bias)

    y = ad.conv2d(y, params["output_conv.weight"], params["output_conv.bias"],
                  stride=1, pads=(1, 1, 1, 1), partial=True)
    return ad.relu(y)


def transconv_block_forward(encoded: Tensor, in_map: Tensor,
                            params: TransConvBlockParams) -> Tensor:
    """Numpy surface over ``transconv_block_t``; accepts a self-similarity map
    (spatial dims K+1) or a noise map of any size >= 1."""
    params.validate()
    if encoded.c != params.channels:
        raise ShapeError(f"block built for {params.channels} channels, got {encoded.c}")
    if in_map.c != 1 or in_map.n != encoded.n:
        raise ShapeError(f"input map must be [{encoded.n},1,*,*], got {in_map.dims}")
    tape = Tape()
    out = transconv_block_t(tape, tape.constant(encoded.data), tape.constant(in_map.data),
                            params.tensors)
    return Tensor(out.value)


def noise_map_sizes(n5h: int, n5w: int) -> dict[int, tuple[int, int]]:
    """Map sizes per scale divisor forced by the decoder's skip sums."""
    return {
        16: (n5h, n5w),
        8: (2 * n5h - 1, 2 * n5w - 1),
        4: (4 * n5h - 3, 4 * n5w - 3),
    }


def make_noise_maps(base_size: tuple[int, int], rng: np.random.Generator,
                    n: int = 1, dtype=np.float32) -> dict[int, Tensor]:
    """Sample the smallest-scale map i.i.d. standard normal, then bilinearly
    resize it for the two finer scales. Keys are scale divisors 16/8/4."""
    n5h, n5w = base_size
    if n5h < 1 or n5w < 1:
        raise ShapeError(f"noise map size must be >= 1, got {n5h}x{n5w}")
    sizes = noise_map_sizes(n5h, n5w)
    base = rng.standard_normal((n, 1, n5h, n5w)).astype(dtype)
    maps = {16: Tensor(base)}
    for scale in (8, 4):
        th, tw = sizes[scale]
        maps[scale] = Tensor(_bilinear_raw(base, th, tw))
    return maps
