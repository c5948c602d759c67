"""Spectral statistics of bright squeezed vacuum from high-gain type-I down-conversion."""

__version__ = "0.1.0"
