"""Spatial cluster-randomized trial design and analysis."""

__version__ = "0.1.0"
