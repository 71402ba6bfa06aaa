"""Engagement modelling toolkit: windowed features, boosted trees, evaluation protocols and re-engagement policies."""

__version__ = "0.1.0"
