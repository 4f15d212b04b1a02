"""Streamable dynamic Gaussian-anchor video codec at desk scale."""

__version__ = "0.1.0"
