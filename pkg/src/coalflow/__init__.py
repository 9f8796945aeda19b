"""Coalescing diffusive flows on the circle and their disturbance-flow approximations."""

__version__ = "0.1.0"
