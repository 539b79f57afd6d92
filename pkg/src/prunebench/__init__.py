"""Pruning vs. adversarial robustness laboratory."""

__version__ = "0.1.0"
