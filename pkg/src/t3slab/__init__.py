"""Desk-scale laboratory for trajectory-aware token selection in continual distillation."""

__version__ = "0.1.0"
