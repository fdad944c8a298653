"""Domain-generalized semi-supervised segmentation with multi-branch normalization."""

__version__ = "0.1.0"
