"""Deformable image registration with fusion/overlapping attention and a superresolution decoder."""
from ._kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
