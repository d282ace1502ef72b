"""Desk-scale functional pre-grasp manipulation laboratory."""

__version__ = "0.1.0"
