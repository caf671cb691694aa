"""Seamless multi-class land-cover maps from tiled segmentation heat maps."""

__version__ = "0.1.0"
