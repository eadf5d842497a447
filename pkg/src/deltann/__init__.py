"""Hessian outliers and weak recovery of hard directions in two-layer networks."""

__version__ = "0.1.0"
