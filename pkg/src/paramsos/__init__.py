"""Parametric stability regions for polynomial systems via sum-of-squares programming."""

__version__ = "0.1.0"
