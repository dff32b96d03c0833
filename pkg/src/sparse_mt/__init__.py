"""Adaptive language-conditioned sparse Transformer for multilingual translation."""

__version__ = "0.1.0"

from . import errors
from .tensor import Tensor, Tape, no_grad

__all__ = ["errors", "Tensor", "Tape", "no_grad", "__version__"]
