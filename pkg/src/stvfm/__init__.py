"""Reprogramming a frozen vision transformer for spatio-temporal grid forecasting."""

__version__ = "0.1.0"
