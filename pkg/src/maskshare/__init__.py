"""Adaptive parameter sharing for multi-agent actor-critic training."""

__version__ = "0.1.0"
