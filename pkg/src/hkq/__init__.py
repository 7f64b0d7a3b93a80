"""Stochastic quantization of the time-dependent harmonic oscillator."""

__version__ = "0.1.0"
