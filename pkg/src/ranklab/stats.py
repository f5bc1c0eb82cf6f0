"""Streaming moment estimates with an associative merge."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MomentEstimate:
    """Monte Carlo estimate of ``E[Z**p]`` for some nonnegative ``Z``.

    ``std_error`` is the sample standard deviation of the ``p``-th powers over
    ``sqrt(count)``.  ``notes`` carries diagnostics (hard-cap fraction,
    reliability flags) without changing the numeric contract.
    """

    p: float
    mean: float
    std_error: float
    count: int
    notes: dict = field(default_factory=dict, compare=False)

    @property
    def reliable(self) -> bool:
        return not self.notes.get("unreliable", False)

    def __str__(self) -> str:
        return f"{self.mean:.6g} +- {self.std_error:.3g} (p={self.p:g}, n={self.count})"


@dataclass
class MomentAccumulator:
    """Running count / mean / M2 (sum of squared deviations).

    ``merge`` uses Chan's pairwise update, so any grouping of the same chunks
    combined in the same order gives bitwise-identical results.
    """

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def add(self, values) -> "MomentAccumulator":
        values = np.asarray(values, dtype=float).ravel()
        if values.size == 0:
            return self
        chunk_mean = float(values.mean())
        chunk_m2 = float(((values - chunk_mean) ** 2).sum())
        return self.merge(MomentAccumulator(values.size, chunk_mean, chunk_m2))

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean, other.m2
            return self
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * other.count / total
        self.m2 += other.m2 + delta * delta * self.count * other.count / total
        self.count = total
        return self

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0

    def estimate(self, p: float, **notes) -> MomentEstimate:
        se = math.sqrt(self.variance / self.count) if self.count > 0 else math.nan
        return MomentEstimate(p=p, mean=self.mean, std_error=se, count=self.count, notes=notes)


def moment_of(values, p: float, **notes) -> MomentEstimate:
    """``E[values**p]`` with its standard error, computed in one pass."""
    values = np.asarray(values, dtype=float)
    return MomentAccumulator().add(values**p).estimate(p, **notes)
