"""Confounding-balanced representation learning with a conditional instrument."""

__version__ = "0.1.0"
