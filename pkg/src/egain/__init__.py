"""Extended GAN inversion on a miniature wavelet-driven style generator."""

from egain.errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    DegenerateInputError,
    EgainError,
    NumericDivergenceError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointCorruptError",
    "CheckpointVersionError",
    "DegenerateInputError",
    "EgainError",
    "NumericDivergenceError",
    "ValidationError",
]
