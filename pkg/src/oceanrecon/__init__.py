"""Guided diffusion reconstruction of multi-layer ocean temperature from sparse observations."""

__version__ = "0.1.0"
