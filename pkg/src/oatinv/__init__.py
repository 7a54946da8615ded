"""Optoacoustic tomography simulation, back-projection and invariant training."""

__version__ = "0.1.0"
