"""Homogenization laboratory for reflected diffusions in periodic and quasi-periodic media."""

from __future__ import annotations

__version__ = "0.1.0"
