"""Distributed random reshuffling over communication graphs."""

__version__ = "0.1.0"
