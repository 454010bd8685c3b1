"""Synthetic traffic scenarios and graph-based accident anticipation."""

__version__ = "0.1.0"
