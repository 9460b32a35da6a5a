"""Image decode/encode. Files decode to RGB float32 in [0,1] (alpha dropped,
grayscale replicated); PNG is the only output format. Quantization clamps to
[0,1] then rounds half up, so save -> load -> save is byte-stable."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .tensor import ShapeError, Tensor


def load_image(path) -> Tensor:
    """Decode any PIL-readable image to a [1,3,H,W] float tensor in [0,1]."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return Tensor(arr.transpose(2, 0, 1)[None])


def quantize(t: Tensor) -> np.ndarray:
    """Clamp to [0,1] and round half up to uint8, HWC layout."""
    if t.n != 1 or t.c != 3:
        raise ShapeError(f"expected a [1,3,H,W] image tensor, got {t.dims}")
    x = np.clip(t.data[0], 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_image_png(path, t: Tensor) -> None:
    Image.fromarray(quantize(t), mode="RGB").save(path, format="PNG")


def save_grayscale_png(path, grid: np.ndarray) -> None:
    """Affinely rescale a 2-d array to [0,255] and write it as grayscale PNG.
    A constant array maps to all zeros."""
    if grid.ndim != 2:
        raise ShapeError(f"grayscale map must be 2-d, got shape {grid.shape}")
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        scaled = (grid - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(grid, dtype=np.float64)
    img = np.floor(scaled + 0.5).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PNG")
