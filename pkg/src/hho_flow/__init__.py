"""Hybrid high-order incompressible flow solver on polygonal meshes."""

__version__ = "0.1.0"
