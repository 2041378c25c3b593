"""Coherent explainable recommendation: model, training, decoding and metrics."""

__version__ = "0.1.0"
