"""Sparse-autoencoder features that predict and steer code correctness in a toy transformer."""

__version__ = "0.1.0"
