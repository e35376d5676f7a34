"""Annotation-free few-shot segmentation at desk scale.

Spectral estimation of the support object from deep-feature affinities,
hierarchical prototype extraction, and a query decoder built from cross
large-kernel attention and multi-scale attention gates, plus episodic
sampling, toy training, metrics, file formats, and a CLI.
"""

__version__ = "0.1.0"

from .errors import (
    BadMagicError,
    DegeneratePartitionError,
    FormatError,
    NonConvergenceError,
    NumericalError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    ValidationError,
)
from .tensorkit import ConvSpec, Tape, Tensor, backward, grad_check

__all__ = [
    "BadMagicError",
    "ConvSpec",
    "DegeneratePartitionError",
    "FormatError",
    "NonConvergenceError",
    "NumericalError",
    "Tape",
    "Tensor",
    "TruncatedPayloadError",
    "UnsupportedDtypeError",
    "ValidationError",
    "backward",
    "grad_check",
]
