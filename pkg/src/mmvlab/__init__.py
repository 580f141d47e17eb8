"""Simulation and verification laboratory for robust monotone mean-variance control."""

__version__ = "0.1.0"
