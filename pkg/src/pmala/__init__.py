"""Particle Langevin and particle random-walk samplers for state-space models."""

__version__ = "0.1.0"
