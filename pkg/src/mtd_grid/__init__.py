"""mtd_grid package.

Moving-target detection of false data injection on power-grid measurements.
The click CLI is exposed at package level: `from mtd_grid import cli`.
"""
from .cli import cli

__all__ = ["cli"]
