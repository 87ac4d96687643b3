"""Negative-margin softmax few-shot laboratory."""

__version__ = "0.1.0"
