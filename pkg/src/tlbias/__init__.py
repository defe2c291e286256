"""Thermal-limit (MFLPD) offline-to-online bias correction."""

__version__ = "0.1.0"
