"""Desk-scale multimodal claim verification toolkit."""

__version__ = "0.1.0"
