"""Evaluation metrics: SSIM, Fréchet distance between embedding sets, and the
crop-based protocols with a pluggable embedder.

SSIM follows the standard constants (11x11 Gaussian window with sigma 1.5,
K1=0.01, K2=0.03, dynamic range 1.0) over valid windows only, averaged across
channels and batch. The Fréchet distance uses sample means and covariances
(unbiased, regularized by +1e-6 I) and takes the matrix square root through a
symmetric eigendecomposition with negative eigenvalues clamped to zero.

Crop protocols: "cfid" embeds 8 seeded random crops from each image into a
64-dim space and returns the Fréchet distance between the two small sets
(heavy regularization is what makes 8 samples in 64 dims workable);
"clpips" averages an embedder-space distance between the reference image and
each of 8 random crops of the output. With the shipped fixed-random-pyramid
embedder the scores are internally comparable, not comparable to scores from
pretrained networks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import FeatureExtractor, perceptual_loss
from .tensor import ShapeError, Tensor, _conv2d_raw

CROP_COUNT = 8
CFID_DIM = 64
COV_REG = 1e-6


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return (win / win.sum()).astype(np.float64)


def _window_mean(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    flat = x.reshape(n * c, 1, h, w)
    k = win.shape[0]
    out = _conv2d_raw(flat, win.reshape(1, 1, k, k), None, 1, (0, 0, 0, 0), False)
    return out.reshape(n, c, out.shape[2], out.shape[3])


def ssim(a: Tensor, b: Tensor, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean local SSIM over valid windows, channels, and batch; in [-1, 1]."""
    if a.dims != b.dims:
        raise ShapeError(f"shape mismatch: {a.dims} vs {b.dims}")
    if a.h < cfg.window_size or a.w < cfg.window_size:
        raise ShapeError(f"image {a.h}x{a.w} smaller than the "
                         f"{cfg.window_size}x{cfg.window_size} window")
    win = _gaussian_window(cfg.window_size, cfg.sigma)
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    mu_x = _window_mean(x, win)
    mu_y = _window_mean(y, win)
    sigma_x = _window_mean(x * x, win) - mu_x ** 2
    sigma_y = _window_mean(y * y, win) - mu_y ** 2
    sigma_xy = _window_mean(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sigma_x + sigma_y + c2)
    return float((num / den).mean())


@dataclass
class EmbeddingSet:
    """A set of d-dimensional feature vectors, one per image or crop."""

    vectors: np.ndarray  # (n, d)

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        mu = self.vectors.mean(axis=0)
        if self.vectors.shape[0] < 2:
            cov = np.zeros((self.d, self.d))
        else:
            cov = np.cov(self.vectors, rowvar=False).reshape(self.d, self.d)
        return mu, cov + COV_REG * np.eye(self.d)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: EmbeddingSet, b: EmbeddingSet) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), clamped at 0."""
    if a.d != b.d:
        raise ShapeError(f"embedding dims differ: {a.d} vs {b.d}")
    mu_a, cov_a = a.moments()
    mu_b, cov_b = b.moments()
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)).sum()
    fd = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b)
               - 2.0 * tr_sqrt)
    return max(fd, 0.0)


class PyramidEmbedder:
    """Default embedder over the fixed random pyramid."""

    def __init__(self, ext: FeatureExtractor | None = None):
        self.ext = ext or FeatureExtractor.fixed_random(seed=0)
        self.ident = self.ext.ident

    def embed(self, img: Tensor) -> np.ndarray:
        return self.ext.embed64(img)

    def distance(self, a: Tensor, b: Tensor) -> float:
        return perceptual_loss(a, b, self.ext)


def _random_anchors(h, w, ch, cw, rng, count):
    if ch > h or cw > w:
        raise ShapeError(f"crop {ch}x{cw} larger than image {h}x{w}")
    return [(int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)))
            for _ in range(count)]


def _crop(img: Tensor, anchor, ch, cw) -> Tensor:
    top, left = anchor
    return Tensor(img.data[:, :, top:top + ch, left:left + cw])


def crop_eval(output: Tensor, reference: Tensor, embedder: PyramidEmbedder,
              protocol: str, rng: np.random.Generator,
              crop_size: tuple[int, int] | None = None) -> float:
    """Crop-based score. "cfid": Fréchet distance between embeddings of 8
    output crops and 8 reference crops (output anchors drawn first).
    "clpips": mean embedder distance between the reference image and each of
    8 output crops (crops sized like the reference)."""
    if protocol == "cfid":
        ch, cw = crop_size if crop_size else (output.h // 2, output.w // 2)
        out_anchors = _random_anchors(output.h, output.w, ch, cw, rng, CROP_COUNT)
        ref_anchors = _random_anchors(reference.h, reference.w, ch, cw, rng, CROP_COUNT)
        out_vecs = np.stack([embedder.embed(_crop(output, a, ch, cw))
                             for a in out_anchors])
        ref_vecs = np.stack([embedder.embed(_crop(reference, a, ch, cw))
                             for a in ref_anchors])
        return frechet_distance(EmbeddingSet(out_vecs), EmbeddingSet(ref_vecs))
    if protocol == "clpips":
        ch, cw = crop_size if crop_size else (reference.h, reference.w)
        anchors = _random_anchors(output.h, output.w, ch, cw, rng, CROP_COUNT)
        dists = [embedder.distance(reference, _crop(output, a, ch, cw))
                 for a in anchors]
        return float(np.mean(dists))
    raise ValueError(f"unknown protocol {protocol!r}")
