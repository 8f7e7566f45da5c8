"""Implicit domain-covariance feature augmentation for multi-domain retrieval training."""

__version__ = "0.1.0"
