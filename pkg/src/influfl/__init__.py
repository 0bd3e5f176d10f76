"""Federated learning simulator with leave-one-out influence-weighted personalized aggregation."""

__version__ = "0.1.0"
