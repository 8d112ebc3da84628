"""Exact and learning-based solvers for two-player stochastic LQ games."""

__version__ = "0.1.0"
