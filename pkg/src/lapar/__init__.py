"""Linearly-assembled pixel-adaptive regression for image restoration."""

__version__ = "0.1.0"
