"""Structural observability and identifiability of ODE models with unknown inputs."""

__version__ = "0.1.0"
