"""Continual adaptation of a frozen two-tower encoder, desk scale.

Selective distillation over a pool of frozen adapter snapshots, text-guided
refinement of visual prototypes, and optional Gaussian feature replay, all
on top of a small reverse-mode kernel so every gradient path is checkable.
"""

__version__ = "0.1.0"

from . import tensor
from .errors import (
    ConfigError,
    ConvergenceError,
    DataFormatError,
    NumericsError,
    ProtocolError,
    SecaError,
)

__all__ = [
    "tensor",
    "ConfigError",
    "ConvergenceError",
    "DataFormatError",
    "NumericsError",
    "ProtocolError",
    "SecaError",
    "__version__",
]
