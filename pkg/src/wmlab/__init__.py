"""Coupled black-box watermarking laboratory."""

__version__ = "0.1.0"
