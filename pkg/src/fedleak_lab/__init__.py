"""Gradient leakage laboratory: FL simulation, FedLeak reconstruction, defenses and diagnostics."""

__version__ = "0.1.0"
