"""Quantitative homogenization on supercritical continuum percolation clusters."""

__version__ = "0.1.0"
