"""Exposure-notification simulation with an attested heatmap service."""

__version__ = "0.1.0"
