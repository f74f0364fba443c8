"""Inverse problems solved in an over-complete embedding with a learned regularizer."""

__version__ = "0.1.0"
