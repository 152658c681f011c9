"""Disentangled representation learning on a procedural dSprites lattice."""

__version__ = "0.1.0"
