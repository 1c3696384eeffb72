"""Tri-modal transformer with two-pass token pooling and complexity benchmarks."""

__version__ = "0.1.0"
