"""Approximating Nash social welfare for separable piecewise-linear concave utilities."""

__version__ = "0.1.0"
