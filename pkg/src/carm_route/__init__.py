"""Constraint-aware neural construction solver for multi-variant VRPs."""

__version__ = "0.1.0"
