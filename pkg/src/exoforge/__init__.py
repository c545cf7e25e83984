"""Exoskeleton design, calibration and demonstration-data tooling."""

__version__ = "0.1.0"
