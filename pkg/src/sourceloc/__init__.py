"""Bayesian localization of waterborne-epidemic sources from sensor arrival times."""

__version__ = "0.1.0"
