"""Synthetic aerial livestock detection datasets from a small annotated corpus."""

__version__ = "0.1.0"
