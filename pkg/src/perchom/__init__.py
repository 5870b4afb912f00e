"""Quantitative homogenization experiments on supercritical percolation clusters."""

__version__ = "0.1.0"
