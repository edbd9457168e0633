"""Ownership watermarks for neural networks built from null and true embeddings."""

__version__ = "0.1.0"
