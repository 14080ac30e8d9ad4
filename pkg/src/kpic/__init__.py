"""Kernel embeddings of path-integral stochastic optimal control."""

__version__ = "0.1.0"
