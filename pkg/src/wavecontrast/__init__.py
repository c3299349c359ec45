"""Boundary control and contrast recovery for wave equations on gridded domains."""

__version__ = "0.1.0"
