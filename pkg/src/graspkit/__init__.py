"""Grasp synthesis, octree scene geometry, occlusion fields and evaluation metrics."""

__version__ = "0.1.0"
