"""Probabilistic 3D shape completion of dissected voxel volumes."""

__version__ = "0.1.0"
