"""Robust perception-based controller synthesis via FIR System Level Synthesis."""

__version__ = "0.1.0"
