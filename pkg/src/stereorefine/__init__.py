"""Residual stereo refinement of gridded height models at desk scale."""

__version__ = "0.1.0"
