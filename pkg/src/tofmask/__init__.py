"""Differentiable AMCW time-of-flight simulation and microlens mask learning."""

__version__ = "0.1.0"
