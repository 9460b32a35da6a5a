"""The full synthesis network.

Encoder: nine 3x3 partial-padded convs (strides 1,2,1,2,1,2,1,2,1), each with
batch norm + ReLU, producing features at scales 1, 1/2, 1/4, 1/8, 1/16 with
widths base*mult*{1,2,4,8,16}. The three coarsest feature maps drive one
expansion block each. Decoder: factor-2 bilinear upsampling and 3x3 convs,
with plain elementwise skip sums from the two finer expansion blocks; the
last conv (to RGB) has no norm or activation, so outputs are unbounded until
image serialization clamps them.

An HxW input (dims divisible by 32) yields exactly 2Hx2W in self-similarity
mode. In noise mode the score maps are replaced by sampled maps of sizes
(n5, 2*n5-1, 4*n5-3) and the output is 16*n5 + H - 16 per axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .expansion import BLOCK_PARAM_SHAPES, noise_map_sizes, transconv_block_t
from .selfsim import selfsim_fast_t
from .tensor import F32, NumericError, RunningStats, ShapeError, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
INPUT_DIVISOR = 32

_ENCODER_LAYERS = (
    # name, in_stage, out_stage, stride; stage 0 means the RGB input
    ("conv1", 0, 1, 1),
    ("conv2_1", 1, 2, 2),
    ("conv2_2", 2, 2, 1),
    ("conv3_1", 2, 3, 2),
    ("conv3_2", 3, 3, 1),
    ("conv4_1", 3, 4, 2),
    ("conv4_2", 4, 4, 1),
    ("conv5_1", 4, 5, 2),
    ("conv5_2", 5, 5, 1),
)

_DECODER_LAYERS = (
    # name, in_stage, out_stage, batch_norm
    ("conv6", 5, 4, True),
    ("conv7", 4, 3, True),
    ("conv8", 3, 2, True),
    ("conv9", 2, 1, True),
    ("conv10", 1, -1, False),  # -1 marks the 3-channel RGB output
)


@dataclass(frozen=True)
class GeneratorConfig:
    base_width: int = 64
    width_multiplier: float = 0.25  # desk default; 1.0 restores full widths
    mode: str = "selfsim"  # "selfsim" | "noise"

    def stage_widths(self) -> tuple[int, int, int, int, int]:
        return tuple(max(1, round(self.base_width * self.width_multiplier * k))
                     for k in (1, 2, 4, 8, 16))

    def width(self, stage: int) -> int:
        if stage == 0 or stage == -1:
            return 3
        return self.stage_widths()[stage - 1]


def _conv_param_specs(prefix: str, cin: int, cout: int, bn: bool) -> dict[str, tuple]:
    specs = {f"{prefix}.weight": (cout, cin, 3, 3), f"{prefix}.bias": (cout,)}
    if bn:
        specs[f"{prefix}.bn.gamma"] = (cout,)
        specs[f"{prefix}.bn.beta"] = (cout,)
    return specs


def _bn_buffer_specs(prefix: str, cout: int) -> dict[str, tuple]:
    return {f"{prefix}.bn.running_mean": (cout,), f"{prefix}.bn.running_var": (cout,)}


def generator_param_specs(cfg: GeneratorConfig) -> tuple[dict[str, tuple], dict[str, tuple]]:
    """Exact (params, buffers) name->shape maps for one configuration."""
    params: dict[str, tuple] = {}
    buffers: dict[str, tuple] = {}
    for name, in_stage, out_stage, _stride in _ENCODER_LAYERS:
        cin, cout = cfg.width(in_stage), cfg.width(out_stage)
        params.update(_conv_param_specs(f"enc.{name}", cin, cout, True))
        buffers.update(_bn_buffer_specs(f"enc.{name}", cout))
    for stage in (3, 4, 5):
        c = cfg.width(stage)
        for pname, shape_fn in BLOCK_PARAM_SHAPES.items():
            params[f"block{stage}.{pname}"] = shape_fn(c)
    for name, in_stage, out_stage, bn in _DECODER_LAYERS:
        cin, cout = cfg.width(in_stage), cfg.width(out_stage)
        params.update(_conv_param_specs(f"dec.{name}", cin, cout, bn))
        if bn:
            buffers.update(_bn_buffer_specs(f"dec.{name}", cout))
    return params, buffers


@dataclass
class GeneratorWeights:
    """Named-tensor store for the whole network, params and BN buffers."""

    config: GeneratorConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def init(cfg: GeneratorConfig, seed: int = 0, dtype=F32) -> "GeneratorWeights":
        rng = np.random.default_rng(seed)
        params, buffers = generator_param_specs(cfg)
        t: dict[str, np.ndarray] = {}
        for name, shape in params.items():
            if name.endswith(".bn.gamma"):
                t[name] = np.ones(shape, dtype=dtype)
            elif name.endswith((".bias", ".bn.beta")):
                t[name] = np.zeros(shape, dtype=dtype)
            elif name.endswith("bias_fc.weight"):
                t[name] = (rng.standard_normal(shape) / np.sqrt(shape[1])).astype(dtype)
            else:
                fan_in = int(np.prod(shape[1:]))
                t[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        for name, shape in buffers.items():
            t[name] = (np.ones if name.endswith("var") else np.zeros)(shape, dtype=dtype)
        return GeneratorWeights(cfg, t)

    def param_names(self) -> list[str]:
        return sorted(generator_param_specs(self.config)[0])

    def buffer_names(self) -> list[str]:
        return sorted(generator_param_specs(self.config)[1])

    def validate(self):
        params, buffers = generator_param_specs(self.config)
        want = {**params, **buffers}
        missing = sorted(set(want) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(want))
        if missing or extra:
            raise ShapeError(f"weight name set mismatch: missing {missing}, extra {extra}")
        for name, shape in want.items():
            if tuple(self.tensors[name].shape) != tuple(shape):
                raise ShapeError(
                    f"weight {name}: expected dims {shape}, got {self.tensors[name].shape}")

    def astype(self, dtype) -> "GeneratorWeights":
        return GeneratorWeights(self.config,
                                {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "GeneratorWeights":
        return GeneratorWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})


def _check_input(img_shape, cfg: GeneratorConfig):
    n, c, h, w = img_shape
    if c != 3:
        raise ShapeError(f"generator expects 3-channel input, got {c}")
    if h % INPUT_DIVISOR or w % INPUT_DIVISOR or h == 0 or w == 0:
        raise ShapeError(
            f"input dims must be positive multiples of {INPUT_DIVISOR}, got {h}x{w}")


def _conv_bn_relu(tape: Tape, x: Var, p: Mapping[str, Var], buffers: dict,
                  prefix: str, stride: int, train: bool, bn: bool = True,
                  activation: bool = True) -> Var:
    y = ad.conv2d(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"],
                  stride=stride, pads=(1, 1, 1, 1), partial=True)
    if bn:
        stats = RunningStats(buffers[f"{prefix}.bn.running_mean"],
                             buffers[f"{prefix}.bn.running_var"])
        y = ad.batch_norm(y, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"], stats,
                          train=train, momentum=BN_MOMENTUM, eps=BN_EPS)
        if train:
            buffers[f"{prefix}.bn.running_mean"] = stats.mean
            buffers[f"{prefix}.bn.running_var"] = stats.var
    if activation:
        y = ad.relu(y)
    return y


def encoder_apply(tape: Tape, img: Var, p: Mapping[str, Var], buffers: dict,
                  cfg: GeneratorConfig, train: bool) -> dict[int, Var]:
    """Run the encoder chain; returns features keyed by scale divisor."""
    feats: dict[int, Var] = {}
    x = img
    divisor = 1
    for name, _in_stage, _out_stage, stride in _ENCODER_LAYERS:
        divisor *= stride
        x = _conv_bn_relu(tape, x, p, buffers, f"enc.{name}", stride, train)
        feats[divisor] = x
    return feats


def _block_params(p: Mapping[str, Var], stage: int) -> dict[str, Var]:
    prefix = f"block{stage}."
    return {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}


def generator_apply(tape: Tape, img: Var, p: Mapping[str, Var], buffers: dict,
                    cfg: GeneratorConfig, train: bool,
                    noise_maps: dict[int, np.ndarray] | None = None) -> Var:
    """Full forward pass on the tape. ``noise_maps`` (keyed by scale divisor)
    switches the expansion inputs from self-similarity to noise mode."""
    _check_input(img.value.shape, cfg)
    feats = encoder_apply(tape, img, p, buffers, cfg, train)

    if noise_maps is not None:
        n5h, n5w = noise_maps[16].shape[2], noise_maps[16].shape[3]
        want = noise_map_sizes(n5h, n5w)
        for scale in (4, 8, 16):
            got = noise_maps[scale].shape[2:]
            if tuple(got) != want[scale]:
                raise ShapeError(
                    f"inconsistent noise sizes: scale 1/{scale} map is {got}, "
                    f"expected {want[scale]} for base {n5h}x{n5w}")
        maps = {s: tape.constant(noise_maps[s]) for s in (4, 8, 16)}
    else:
        maps = {s: selfsim_fast_t(tape, feats[s]) for s in (4, 8, 16)}

    blocks = {s: transconv_block_t(tape, feats[s], maps[s], _block_params(p, stage))
              for s, stage in ((4, 3), (8, 4), (16, 5))}

    x = blocks[16]
    x = ad.bilinear_upsample(x, 2 * x.value.shape[2], 2 * x.value.shape[3])
    x = _conv_bn_relu(tape, x, p, buffers, "dec.conv6", 1, train)
    if x.value.shape != blocks[8].value.shape:
        raise ShapeError(f"skip-sum mismatch: {x.value.shape} vs {blocks[8].value.shape}")
    x = ad.add(x, blocks[8])
    x = ad.bilinear_upsample(x, 2 * x.value.shape[2], 2 * x.value.shape[3])
    x = _conv_bn_relu(tape, x, p, buffers, "dec.conv7", 1, train)
    if x.value.shape != blocks[4].value.shape:
        raise ShapeError(f"skip-sum mismatch: {x.value.shape} vs {blocks[4].value.shape}")
    x = ad.add(x, blocks[4])
    x = ad.bilinear_upsample(x, 2 * x.value.shape[2], 2 * x.value.shape[3])
    x = _conv_bn_relu(tape, x, p, buffers, "dec.conv8", 1, train)
    x = ad.bilinear_upsample(x, 2 * x.value.shape[2], 2 * x.value.shape[3])
    x = _conv_bn_relu(tape, x, p, buffers, "dec.conv9", 1, train)
    x = _conv_bn_relu(tape, x, p, buffers, "dec.conv10", 1, train,
                      bn=False, activation=False)
    return x


def _run_inference(img: Tensor, weights: GeneratorWeights,
                   noise_maps: dict[int, np.ndarray] | None) -> Tensor:
    weights.validate()
    tape = Tape()
    p = {name: tape.constant(weights.tensors[name]) for name in weights.param_names()}
    out = generator_apply(tape, tape.constant(img.data), p, weights.tensors,
                          weights.config, train=False, noise_maps=noise_maps)
    if not np.isfinite(out.value).all():
        raise NumericError("non-finite activations in generator forward pass")
    return Tensor(out.value)


def encoder_forward(img: Tensor, weights: GeneratorWeights) -> dict[int, Tensor]:
    """Eval-mode encoder features keyed by scale divisor {1, 2, 4, 8, 16}."""
    weights.validate()
    _check_input(img.dims, weights.config)
    tape = Tape()
    p = {name: tape.constant(weights.tensors[name]) for name in weights.param_names()}
    feats = encoder_apply(tape, tape.constant(img.data), p, weights.tensors,
                          weights.config, train=False)
    return {k: Tensor(v.value) for k, v in feats.items()}


def generator_forward(img: Tensor, weights: GeneratorWeights) -> Tensor:
    """Self-similarity mode: HxW in, 2Hx2W out."""
    return _run_inference(img, weights, None)


def generator_forward_noise(img: Tensor, weights: GeneratorWeights,
                            noise_maps: dict[int, Tensor]) -> Tensor:
    """Noise mode: output size is 16*n5 + H - 16 per axis."""
    return _run_inference(img, weights, {k: v.data for k, v in noise_maps.items()})


def synthesize_4x(img: Tensor, weights: GeneratorWeights) -> Tensor:
    """Two chained passes: HxW -> 2Hx2W -> 4Hx4W."""
    return generator_forward(generator_forward(img, weights), weights)
