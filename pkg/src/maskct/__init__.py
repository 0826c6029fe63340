"""Multi-label weather recognition with label-masking transformers."""

__version__ = "0.1.0"
