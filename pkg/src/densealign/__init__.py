"""Weakly supervised segmentation with dense image-text alignment, at desk scale."""

__version__ = "0.1.0"
