"""Degradation-aware scheduling and closed-loop simulation for battery swapping stations."""

__version__ = "0.1.0"
