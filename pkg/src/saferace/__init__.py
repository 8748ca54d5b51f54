"""Learned racing control with a probabilistic barrier-function safety filter."""

__version__ = "0.1.0"
