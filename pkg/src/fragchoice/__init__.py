"""Interval fragmentations with choice: simulation, fixed points, cell process."""

__version__ = "0.1.0"
