"""Particle simulation and numerical checks for mean-field agents that carry a
position and a probability measure over a finite metric space of labels."""

__version__ = "0.1.0"
