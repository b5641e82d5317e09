"""Bayesian posteriors over cyclic graph structure of dynamical systems."""

__version__ = "0.1.0"
