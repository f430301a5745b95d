"""Retrieval-augmented time-series forecasting on a frozen backbone."""

__version__ = "0.1.0"
