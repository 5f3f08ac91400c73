"""Desk-scale simulator of customized federated learning with per-worker submodels."""

__version__ = "0.1.0"
