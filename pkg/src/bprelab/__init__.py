"""Branching processes in random environment conditioned on survival and a
low terminal position of the driving walk: simulation and numerical checks."""

__version__ = "0.1.0"
