"""Federated SNN/ANN simulator with Byzantine attacks and Top-k sparsified uploads."""

__version__ = "0.1.0"
