"""Measure and regularize how neural networks move through L2 function space."""

__version__ = "0.1.0"
