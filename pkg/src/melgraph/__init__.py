"""Graph-embedding Transformer pipeline for underwater acoustic target recognition."""

__version__ = "0.1.0"
