"""Morphable head reconstruction from normal and landmark maps."""

__version__ = "0.1.0"
