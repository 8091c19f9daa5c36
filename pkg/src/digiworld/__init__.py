"""Simulated personal digital worlds and long-horizon assistant tasks over them."""

__version__ = "0.1.0"
