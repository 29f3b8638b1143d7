"""Residual-based detection limits lab for AC state estimation."""

__version__ = "0.1.0"
