"""Multi-modal prototype classifiers for large vocabularies."""

__version__ = "0.1.0"
