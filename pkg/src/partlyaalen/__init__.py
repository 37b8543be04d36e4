"""Additive hazard regression with partly parametric, partly nonparametric regressor functions."""

__version__ = "0.1.0"
