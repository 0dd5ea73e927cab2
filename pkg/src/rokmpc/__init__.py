"""Reduced-order lifted linear modeling and robust predictive control toolkit."""

__version__ = "0.1.0"
