"""Energy-based classifiers whose input gradient doubles as a diffusion score."""

__version__ = "0.1.0"
