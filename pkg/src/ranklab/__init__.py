"""Simulation, dynamic programming and inequality checks for minimizing the expected rank of a stopped sample."""

from .dist import DistributionSpec, InfiniteMeanError, RngStream

__all__ = ["DistributionSpec", "InfiniteMeanError", "RngStream"]
__version__ = "0.1.0"
