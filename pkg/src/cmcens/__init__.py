"""Cross-model compatible embedding ensembles for asymmetric retrieval."""

__version__ = "0.1.0"
