"""Deterministic federated training simulator for grid-based object detection."""

__version__ = "0.1.0"
