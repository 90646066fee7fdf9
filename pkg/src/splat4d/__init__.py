"""Desk-scale differentiable 4D Gaussian splatting engine."""

__version__ = "0.1.0"
