"""Hierarchical slide/report alignment engine at desk scale."""

__version__ = "0.1.0"
