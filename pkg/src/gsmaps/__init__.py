"""Articulable Gaussian avatars anchored on mesh shells."""

__version__ = "0.1.0"
