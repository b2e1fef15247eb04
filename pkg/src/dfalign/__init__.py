"""Cascaded fashion-landmark alignment with pseudo-labels and auto-routing."""

__version__ = "0.1.0"
