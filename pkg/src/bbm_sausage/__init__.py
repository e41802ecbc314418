"""Shrinking BBM-sausage simulator and its closed-form limits."""

__version__ = "0.1.0"
