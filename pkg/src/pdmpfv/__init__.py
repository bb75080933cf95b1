"""Finite-volume densities of piecewise deterministic Markov processes with a Monte-Carlo oracle."""

__version__ = "0.1.0"
