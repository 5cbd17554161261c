"""Pocket-conditioned molecular optimization with affinity-guided equivariant diffusion."""

__version__ = "0.1.0"
