"""Contextual-bandit learning for extractive span selection from simulated feedback."""

__version__ = "0.1.0"
