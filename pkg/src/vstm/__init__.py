"""Structural topic modeling for continuous image embeddings."""

__version__ = "0.1.0"
