"""Lockbox: a locally runnable Zero Trust pipeline for sensitive documents."""

__version__ = "0.1.0"
