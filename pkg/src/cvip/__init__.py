"""Compressed-video IP two-stream recognition at desk scale."""

__version__ = "0.1.0"
