"""Bayesian dating of binary trait phylogenies under a stochastic Dollo model with catastrophes."""

__version__ = "0.1.0"
