"""Learned geodesic-patch features for particle-based shape correspondence."""

__version__ = "0.1.0"
