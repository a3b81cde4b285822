"""Explainable multi-abnormality classification for volumetric scans."""

__version__ = "0.1.0"
