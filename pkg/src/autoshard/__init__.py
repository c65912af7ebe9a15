"""Automatic SPMD partitioning of small tensor programs."""

__version__ = "0.1.0"
