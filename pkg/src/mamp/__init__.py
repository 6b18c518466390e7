"""Masked motion prediction pre-training for 3D skeleton sequences."""

__version__ = "0.1.0"
