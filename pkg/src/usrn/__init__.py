"""Desk-scale laboratory for subclass-regularized semi-supervised pixel classification."""

__version__ = "0.1.0"
