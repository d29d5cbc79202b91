"""Duality-gap tools for linear and multi-branch networks."""

__version__ = "0.1.0"
