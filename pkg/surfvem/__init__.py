"""Intrinsic Virtual Element Method on parametrized surfaces"""

__version__ = "1.0.0"
