"""Structured amortised variational inference for latent GP, tree and mixture models."""
import torch

torch.set_default_dtype(torch.float64)

from .errors import (InfiniteKL, MalformedTree, NegativeCount, NonScalarRoot,  # noqa: E402
                     NotPositiveDefinite, NumericalError, ShapeMismatch, SRVAEError,
                     StructureMismatch, TooLarge, TrainingError, ZeroVariance)

__version__ = "0.1.0"

__all__ = [
    "InfiniteKL", "MalformedTree", "NegativeCount", "NonScalarRoot", "NotPositiveDefinite",
    "NumericalError", "ShapeMismatch", "SRVAEError", "StructureMismatch", "TooLarge",
    "TrainingError", "ZeroVariance", "__version__",
]
