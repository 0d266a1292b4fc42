"""Amortized, context-aware control variates for doubly stochastic gradients."""

__version__ = "0.1.0"
