"""Exact and sparse deep-kernel Gaussian processes with overfitting diagnostics."""

__version__ = "0.1.0"
