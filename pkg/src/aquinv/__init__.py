"""Contaminant source identification with surrogate-accelerated ensemble smoothing."""

__version__ = "0.1.0"
