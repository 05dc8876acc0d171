"""Streaming speech anonymisation with causal neural processing."""

__version__ = "0.1.0"
