"""Interleaved 2D/3D multiview instance segmentation at desk scale."""

__version__ = "0.1.0"
