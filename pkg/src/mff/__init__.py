"""Frustum-based long-range 3D detection toolkit."""

__version__ = "0.1.0"
