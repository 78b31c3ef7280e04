"""Incremental segmentation with synthetic error replay from a frozen diffusion teacher."""

__version__ = "0.1.0"
