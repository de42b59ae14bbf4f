"""Numerical lab for one-layer softmax attention on q-sparse token selection."""

__version__ = "0.1.0"
