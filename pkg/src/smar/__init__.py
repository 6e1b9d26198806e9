"""Modality-asymmetric dense retrieval: text-only queries against text+image items."""

__version__ = "0.1.0"
