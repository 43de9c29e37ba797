"""Integrated gated calculator on a tiny from-scratch transformer host."""
__version__ = "0.1.0"
