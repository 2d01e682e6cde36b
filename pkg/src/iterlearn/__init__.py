"""Iterated learning for dual-encoder contrastive agents with a shared sparse codebook."""

__version__ = "0.1.0"
