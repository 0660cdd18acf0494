"""Stationary-velocity-field deformation algebra for individualized aging synthesis."""

from .grid import GeometryMismatch, GridGeometry, ScalarVolume, VectorField

__all__ = ["GeometryMismatch", "GridGeometry", "ScalarVolume", "VectorField"]
__version__ = "0.1.0"
