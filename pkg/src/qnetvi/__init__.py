"""Variational inference of service rates in partially observed queueing networks."""

__version__ = "0.1.0"
