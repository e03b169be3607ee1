"""Planar-prior guided Gaussian splatting for indoor surface reconstruction."""

__version__ = "0.1.0"
