"""Predictive, incremental video hashing for mid-stream retrieval."""

__version__ = "0.1.0"
