"""Distributionally robust preference learning on synthetic log-linear models."""
__version__ = "0.1.0"
