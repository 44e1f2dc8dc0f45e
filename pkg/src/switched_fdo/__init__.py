"""Robust fault-detection observers for discrete-time switched linear systems."""

__version__ = "0.1.0"
