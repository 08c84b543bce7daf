"""Budgeted dynamic feature acquisition on regular time series."""

__version__ = "0.1.0"
