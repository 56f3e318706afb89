"""Coarse-to-fine hybrid random field for detection, 3D pose and sub-category recognition."""

__version__ = "0.1.0"
