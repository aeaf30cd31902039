"""Supervised auto-encoder representations for pathological speech classification."""

__version__ = "0.1.0"
