"""Bayesian group testing with belief propagation and active pool design."""

__version__ = "0.1.0"
