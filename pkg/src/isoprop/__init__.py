"""Dual-space class prototypes refined by attention propagation, for zero-shot classification."""
from isoprop.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
