"""Federated offline actor-critic learning with priority-weighted aggregation."""

__version__ = "0.1.0"
