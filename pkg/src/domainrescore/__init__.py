"""Domain-aware second-pass rescoring on a synthetic multi-domain corpus."""

__version__ = "0.1.0"
