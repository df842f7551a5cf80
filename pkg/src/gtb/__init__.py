"""Gather-Trade-Build economy simulation and two-level RL tax design."""

__version__ = "0.1.0"
