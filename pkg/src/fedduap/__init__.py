"""Federated learning with dynamic server update and adaptive structured pruning."""

__version__ = "0.1.0"
