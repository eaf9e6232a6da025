"""Finite-sample nonparametric tests based on smoothing splines."""

__version__ = "0.1.0"
