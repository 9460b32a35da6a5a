"""Training losses over a pluggable fixed feature extractor, plus the patch
discriminator and the crop-based adversarial objective.

The perceptual term is the per-level mean absolute difference between
feature pyramids of the two images, summed over levels. The style term
compares channel Gram matrices per level: with features of C_p channels over
H_p x W_p positions, the Gram difference is scaled by 1/(C_p H_p W_p),
L1-normed, and weighted by 1/C_p^2; per-item terms are averaged over the
batch. Both losses are extractor-agnostic: the desk default is a five-level
frozen random pyramid (stride-2 3x3 conv + ReLU, widths 8/16/32/64/64,
weights drawn once from a seeded normal scaled by 1/sqrt(fan-in)), and an
extractor loaded from a weight archive can replace it without touching the
loss math. Scores from the desk extractor are internally comparable only.

The discriminator sees the concatenation of the network input and an
HxW random crop of either the real target or the synthesized output: four
stride-2 4x4 convs with leaky ReLU (0.2) and no normalization, then a 4x4
conv to a 1-channel patch map. The adversarial objective is least-squares
over 10 crops per side (crop anchors consume the step RNG in a fixed order:
output crops 0-9, then target crops 0-9; losses are averaged over crops).
The discriminator's fake crops come from the detached output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .tensor import F32, ShapeError, Tensor

EXTRACTOR_CHANNELS = (8, 16, 32, 64, 64)
LEAKY_SLOPE = 0.2


# ---------------------------------------------------------------------------
# feature extractor
# ---------------------------------------------------------------------------

class FeatureExtractor:
    """Frozen convolutional pyramid. Gradients flow to the input only."""

    def __init__(self, tensors: dict[str, np.ndarray], ident: str):
        self.tensors = tensors
        self.ident = ident
        self.n_levels = len({k.split(".")[0] for k in tensors})

    @staticmethod
    def fixed_random(seed: int = 0, dtype=F32,
                     channels: tuple[int, ...] = EXTRACTOR_CHANNELS) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        t: dict[str, np.ndarray] = {}
        cin = 3
        for i, cout in enumerate(channels):
            fan_in = cin * 9
            t[f"level{i}.weight"] = (rng.standard_normal((cout, cin, 3, 3))
                                     / np.sqrt(fan_in)).astype(dtype)
            t[f"level{i}.bias"] = np.zeros(cout, dtype=dtype)
            cin = cout
        return FeatureExtractor(t, f"fixed-pyramid-v1-seed{seed}")

    def astype(self, dtype) -> "FeatureExtractor":
        return FeatureExtractor({k: v.astype(dtype) for k, v in self.tensors.items()},
                                self.ident)

    def save(self, path) -> None:
        from .archive import save_archive

        save_archive(path, self.tensors, extra={"extractor_ident": self.ident})

    @staticmethod
    def load(path) -> "FeatureExtractor":
        """Load a replacement extractor (e.g. exported pretrained features)
        from the same archive format the generator weights use."""
        from .archive import ArchiveError, load_archive

        tensors, header = load_archive(path)
        for name in tensors:
            parts = name.split(".")
            if len(parts) != 2 or not parts[0].startswith("level") \
                    or parts[1] not in ("weight", "bias"):
                raise ArchiveError(f"unexpected extractor tensor name {name!r}")
        return FeatureExtractor(tensors, str(header.get("extractor_ident", "external")))

    def apply_t(self, tape: Tape, img: Var) -> list[Var]:
        levels = []
        x = img
        for i in range(self.n_levels):
            x = ad.conv2d(x, self.tensors[f"level{i}.weight"],
                          self.tensors[f"level{i}.bias"],
                          stride=2, pads=(1, 1, 1, 1))
            x = ad.relu(x)
            levels.append(x)
        return levels

    def pyramid(self, img: Tensor) -> list[np.ndarray]:
        tape = Tape()
        return [v.value for v in self.apply_t(tape, tape.constant(img.data))]

    def embed64(self, img: Tensor) -> np.ndarray:
        """64-dim embedding: global average pool of the deepest level."""
        top = self.pyramid(img)[-1]
        return top.mean(axis=(2, 3)).ravel()


@dataclass(frozen=True)
class LossWeights:
    perceptual: float = 0.05
    style: float = 120.0
    gan: float = 0.2


@dataclass
class LossReport:
    perceptual: float
    style: float
    gan_g: float
    gan_d: float
    total: float

    def to_dict(self) -> dict:
        return {"perceptual": self.perceptual, "style": self.style,
                "gan_g": self.gan_g, "gan_d": self.gan_d, "total": self.total}


# ---------------------------------------------------------------------------
# perceptual and style losses
# ---------------------------------------------------------------------------

def _check_same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def perceptual_loss_t(tape: Tape, out: Var, target: Var, ext: FeatureExtractor) -> Var:
    _check_same_shape(out.value, target.value)
    total = None
    for po, pt in zip(ext.apply_t(tape, out), ext.apply_t(tape, target)):
        term = ad.mean_all(ad.abs_(ad.sub(po, pt)))
        total = term if total is None else ad.add(total, term)
    return total


def style_loss_t(tape: Tape, out: Var, target: Var, ext: FeatureExtractor) -> Var:
    _check_same_shape(out.value, target.value)
    total = None
    for po, pt in zip(ext.apply_t(tape, out), ext.apply_t(tape, target)):
        n, c, h, w = po.value.shape
        diff = ad.sub(ad.gram(po), ad.gram(pt))
        k = 1.0 / (c * h * w)
        term = ad.scale(ad.sum_all(ad.abs_(diff)), k / (c * c) / n)
        total = term if total is None else ad.add(total, term)
    return total


def perceptual_loss(out: Tensor, target: Tensor, ext: FeatureExtractor) -> float:
    tape = Tape()
    return float(perceptual_loss_t(tape, tape.constant(out.data),
                                   tape.constant(target.data), ext).value)


def style_loss(out: Tensor, target: Tensor, ext: FeatureExtractor) -> float:
    tape = Tape()
    return float(style_loss_t(tape, tape.constant(out.data),
                              tape.constant(target.data), ext).value)


def gram_matrix(psi: Tensor) -> np.ndarray:
    """Per-item channel Gram matrix, [N,C,H,W] -> [N,C,C]."""
    tape = Tape()
    return ad.gram(tape.constant(psi.data)).value


def total_loss(perceptual: float, style: float, gan_g: float,
               weights: LossWeights = LossWeights()) -> float:
    return weights.perceptual * perceptual + weights.style * style + weights.gan * gan_g


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

_DISC_STAGE_FACTORS = (1, 2, 4, 8)


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_width: int = 64
    width_multiplier: float = 0.25
    n_scales: int = 1  # extra scales see 2x-downsampled pairs

    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, round(self.base_width * self.width_multiplier * k))
                     for k in _DISC_STAGE_FACTORS)


def discriminator_param_specs(cfg: DiscriminatorConfig) -> dict[str, tuple]:
    specs: dict[str, tuple] = {}
    for s in range(cfg.n_scales):
        cin = 6
        for i, cout in enumerate(cfg.widths()):
            specs[f"d{s}.conv{i}.weight"] = (cout, cin, 4, 4)
            specs[f"d{s}.conv{i}.bias"] = (cout,)
            cin = cout
        specs[f"d{s}.out.weight"] = (1, cin, 4, 4)
        specs[f"d{s}.out.bias"] = (1,)
    return specs


@dataclass
class DiscriminatorWeights:
    config: DiscriminatorConfig
    tensors: dict[str, np.ndarray]

    @staticmethod
    def init(cfg: DiscriminatorConfig, seed: int = 0, dtype=F32) -> "DiscriminatorWeights":
        rng = np.random.default_rng(seed)
        t: dict[str, np.ndarray] = {}
        for name, shape in discriminator_param_specs(cfg).items():
            if name.endswith(".bias"):
                t[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[1:]))
                t[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        return DiscriminatorWeights(cfg, t)

    def param_names(self) -> list[str]:
        return sorted(discriminator_param_specs(self.config))

    def validate(self):
        want = discriminator_param_specs(self.config)
        if set(want) != set(self.tensors):
            raise ShapeError(
                f"discriminator name set mismatch: missing "
                f"{sorted(set(want) - set(self.tensors))}, "
                f"extra {sorted(set(self.tensors) - set(want))}")
        for name, shape in want.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ShapeError(f"discriminator {name}: expected {shape}, "
                                 f"got {self.tensors[name].shape}")

    def astype(self, dtype) -> "DiscriminatorWeights":
        return DiscriminatorWeights(self.config,
                                    {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "DiscriminatorWeights":
        return DiscriminatorWeights(self.config,
                                    {k: v.copy() for k, v in self.tensors.items()})


def discriminator_apply(tape: Tape, pair: Var, p: Mapping[str, "Var | np.ndarray"],
                        cfg: DiscriminatorConfig, scale: int = 0) -> Var:
    if pair.value.shape[1] != 6:
        raise ShapeError(f"discriminator expects 6 channels, got {pair.value.shape[1]}")
    x = pair
    for i in range(len(cfg.widths())):
        x = ad.conv2d(x, p[f"d{scale}.conv{i}.weight"], p[f"d{scale}.conv{i}.bias"],
                      stride=2, pads=(1, 1, 1, 1))
        x = ad.leaky_relu(x, LEAKY_SLOPE)
    return ad.conv2d(x, p[f"d{scale}.out.weight"], p[f"d{scale}.out.bias"],
                     stride=1, pads=(1, 1, 1, 1))


def discriminator_forward(pair: Tensor, weights: DiscriminatorWeights) -> Tensor:
    weights.validate()
    tape = Tape()
    out = discriminator_apply(tape, tape.constant(pair.data), weights.tensors,
                              weights.config)
    return Tensor(out.value)


# ---------------------------------------------------------------------------
# adversarial loss
# ---------------------------------------------------------------------------

N_CROPS = 10


def draw_crop_anchors(out_shape, crop_h: int, crop_w: int,
                      rng: np.random.Generator) -> tuple[list, list]:
    """Anchor draw order is part of the contract: output crops first."""
    h, w = out_shape[2], out_shape[3]
    if crop_h > h or crop_w > w:
        raise ShapeError(f"crop {crop_h}x{crop_w} larger than image {h}x{w}")
    out_anchors = [(int(rng.integers(0, h - crop_h + 1)),
                    int(rng.integers(0, w - crop_w + 1))) for _ in range(N_CROPS)]
    tgt_anchors = [(int(rng.integers(0, h - crop_h + 1)),
                    int(rng.integers(0, w - crop_w + 1))) for _ in range(N_CROPS)]
    return out_anchors, tgt_anchors


def _scale_pair_inputs(inp_c, crop, n_scales):
    """Pairs for each discriminator scale; extra scales are 2x downsampled."""
    pairs = [ad.concat_channels(inp_c, crop)]
    for _ in range(1, n_scales):
        prev = pairs[-1]
        h, w = prev.value.shape[2], prev.value.shape[3]
        pairs.append(ad.bilinear_upsample(prev, max(1, h // 2), max(1, w // 2)))
    return pairs


def _lsgan_mean_sq(d_out: Var, target_value: float) -> Var:
    if target_value == 0.0:
        return ad.mean_all(ad.square(d_out))
    return ad.mean_all(ad.square(ad.add_const(d_out, -target_value)))


def _d_scalar(tape, parms, cfg, inp_c, crop, target_value) -> Var:
    total = None
    for s, pair in enumerate(_scale_pair_inputs(inp_c, crop, cfg.n_scales)):
        term = _lsgan_mean_sq(discriminator_apply(tape, pair, parms, cfg, s),
                              target_value)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / cfg.n_scales) if cfg.n_scales > 1 else total


def gan_losses_t(tape_g: Tape, tape_d: Tape, out_g: Var, target: np.ndarray,
                 inp: np.ndarray, d_params_g: Mapping, d_params_d: Mapping,
                 cfg: DiscriminatorConfig, rng: np.random.Generator) -> tuple[Var, Var]:
    """(gan_g on the generator tape, gan_d on the discriminator tape).

    The generator term drives its output crops toward the real label through
    the current discriminator (entering as constants); the discriminator term
    sees the same output crops detached.
    """
    n, c, oh, ow = out_g.value.shape
    crop_h, crop_w = inp.shape[2], inp.shape[3]
    if target.shape != out_g.value.shape:
        raise ShapeError(f"target shape {target.shape} != output {out_g.value.shape}")
    if (oh, ow) != (2 * crop_h, 2 * crop_w):
        raise ShapeError(f"output {oh}x{ow} must be twice the input {crop_h}x{crop_w}")
    out_anchors, tgt_anchors = draw_crop_anchors(out_g.value.shape, crop_h, crop_w, rng)

    inp_g = tape_g.constant(inp)
    inp_d = tape_d.constant(inp)
    out_detached = out_g.value

    gan_g = None
    for (top, left) in out_anchors:
        crop = ad.crop_at(out_g, top, left, crop_h, crop_w)
        term = _d_scalar(tape_g, d_params_g, cfg, inp_g, crop, 1.0)
        gan_g = term if gan_g is None else ad.add(gan_g, term)
    gan_g = ad.scale(gan_g, 1.0 / N_CROPS)

    gan_d = None
    for (top, left), (ft, fl) in zip(tgt_anchors, out_anchors):
        real = tape_d.constant(target[:, :, top:top + crop_h, left:left + crop_w])
        fake = tape_d.constant(out_detached[:, :, ft:ft + crop_h, fl:fl + crop_w])
        real_term = _d_scalar(tape_d, d_params_d, cfg, inp_d, real, 1.0)
        fake_term = _d_scalar(tape_d, d_params_d, cfg, inp_d, fake, 0.0)
        term = ad.scale(ad.add(real_term, fake_term), 0.5)
        gan_d = term if gan_d is None else ad.add(gan_d, term)
    gan_d = ad.scale(gan_d, 1.0 / N_CROPS)
    return gan_g, gan_d


def gan_losses(out: Tensor, target: Tensor, inp: Tensor,
               d_weights: DiscriminatorWeights,
               rng: np.random.Generator) -> tuple[float, float]:
    """Value-only surface over ``gan_losses_t``."""
    d_weights.validate()
    tape_g, tape_d = Tape(), Tape()
    g, d = gan_losses_t(tape_g, tape_d, tape_g.constant(out.data), target.data,
                        inp.data, d_weights.tensors, d_weights.tensors,
                        d_weights.config, rng)
    return float(g.value), float(d.value)


Embedder = Callable[[Tensor], np.ndarray]
