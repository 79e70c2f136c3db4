"""Closed-loop verification of neural trajectory-tracking controllers."""

__version__ = "0.1.0"
