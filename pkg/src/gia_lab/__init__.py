"""Desk-scale gradient inversion attack laboratory."""

__version__ = "0.1.0"
