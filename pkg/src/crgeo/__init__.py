"""Exact symbolic tools for first-order PDE systems of Cauchy-Riemann type."""

__version__ = "0.1.0"
