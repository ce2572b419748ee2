"""Desk-scale few-shot relation learning with absolute-relative supervision."""

__version__ = "0.1.0"
