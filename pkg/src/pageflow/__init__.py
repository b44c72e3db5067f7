"""Lifetime-based page memory management for a miniature dataflow engine."""

__version__ = "0.1.0"
