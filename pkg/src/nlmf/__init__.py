"""Nonlinear large deviations via the mean-field approximation of log-partition functions."""

__version__ = "0.1.0"
