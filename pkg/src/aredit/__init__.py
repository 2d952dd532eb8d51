"""Conditional autoregressive image editing on a desk-scale synthetic corpus."""

from .estimator import ConditionalEditor

__all__ = ["ConditionalEditor"]

__version__ = "0.1.0"
