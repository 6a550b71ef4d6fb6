"""Diffusion-regularized implicit neural representations for sparse-view CT."""

__version__ = "0.1.0"
