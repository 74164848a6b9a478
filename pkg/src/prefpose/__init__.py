"""Preference-aligned diffusion pose lifting on a synthetic articulated skeleton."""

from ._kernels import backend

__version__ = "0.1.0"
__all__ = ["backend", "__version__"]
