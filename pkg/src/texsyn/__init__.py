"""Differentiable texture synthesis: encoded feature maps act as transposed
convolution filters, driven by their own self-similarity maps (or sampled
noise maps for diverse and arbitrarily large outputs)."""

from .tensor import (
    ConvSpec,
    DegenerateBatchError,
    NumericError,
    Padding,
    RunningStats,
    ShapeError,
    Tensor,
)

__version__ = "0.1.0"

__all__ = [
    "ConvSpec",
    "DegenerateBatchError",
    "NumericError",
    "Padding",
    "RunningStats",
    "ShapeError",
    "Tensor",
    "__version__",
]
