"""Uniform order statistics built from exponential partial sums, and the event ``A_n``.

Two normalizations are available:

* ``LAST_SN``: ``Y_k = S_k / S_n`` over ``n`` Exp(1) increments, so ``Y_n == 1``.
  This is the form used in the pathwise decomposition checks.
* ``BETA_SN1``: ``Y_k = S_k / S_{n+1}`` over ``n + 1`` increments, the textbook form
  in which ``(Y_1..Y_n)`` are the order statistics of ``n`` uniforms and
  ``Y_k ~ Beta(k, n - k + 1)``.

Under ``LAST_SN`` the top value is degenerate; ``(Y_1..Y_{n-1})`` are then the
order statistics of ``n - 1`` uniforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dist import RngStream
from .stats import MomentAccumulator, MomentEstimate


class Normalization(str, Enum):
    LAST_SN = "LastSn"
    BETA_SN1 = "BetaSn1"


@dataclass(frozen=True)
class OrderStatSample:
    """One embedded sample.

    ``sums`` holds every partial sum that was drawn (``n`` of them for
    ``LAST_SN``, ``n + 1`` for ``BETA_SN1``); ``order_stats`` has length ``n``.
    ``coupling`` identifies the increment stream when the sample was built
    jointly with a walk supremum.
    """

    n: int
    sums: np.ndarray
    order_stats: np.ndarray
    normalization: Normalization
    coupling: object = None

    @property
    def S_n(self) -> float:
        return float(self.sums[self.n - 1])

    @classmethod
    def from_increments(cls, increments, n: int, normalization=Normalization.LAST_SN, coupling=None) -> "OrderStatSample":
        normalization = Normalization(normalization)
        need = n if normalization is Normalization.LAST_SN else n + 1
        increments = np.asarray(increments, dtype=float)
        if increments.size < need:
            raise ValueError(f"need {need} increments, got {increments.size}")
        sums = np.cumsum(increments[:need])
        return cls(n, sums, sums[:n] / sums[need - 1], normalization, coupling)


@dataclass(frozen=True)
class LargeDevEvent:
    epsilon: float
    occurred: bool


def _need(n: int, normalization: Normalization) -> int:
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    return n if Normalization(normalization) is Normalization.LAST_SN else n + 1


def sample_order_stats(n: int, normalization: Normalization, rng: RngStream) -> OrderStatSample:
    increments = rng.generator.standard_exponential(_need(n, normalization))
    return OrderStatSample.from_increments(increments, n, normalization)


def sample_order_stats_batch(n: int, normalization: Normalization, count: int, rng: RngStream) -> np.ndarray:
    """``(count, n)`` array of embedded order-statistic vectors."""
    need = _need(n, normalization)
    sums = np.cumsum(rng.generator.standard_exponential((count, need)), axis=1)
    return sums[:, :n] / sums[:, need - 1 : need]


def event_An(sample: OrderStatSample, epsilon: float) -> LargeDevEvent:
    """Indicator of ``A_n = {n / S_n > 1 + eps}``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return LargeDevEvent(epsilon, bool(sample.n / sample.S_n > 1.0 + epsilon))


def cramer_rate(epsilon: float) -> float:
    """Exponential decay rate of ``P(A_n)`` for Exp(1) increments: ``eps - log(1 + eps)``."""
    return epsilon - math.log1p(epsilon)


def prob_An(n: int, epsilon: float, trials: int, rng: RngStream, chunk: int = 1_000_000) -> MomentEstimate:
    """Monte Carlo estimate of ``P(A_n)``.

    ``S_n`` is a sum of ``n`` Exp(1) increments, drawn directly as Gamma(n, 1).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    acc = MomentAccumulator()
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        s_n = rng.generator.standard_gamma(n, size)
        acc.add(n / s_n > 1.0 + epsilon)
        done += size
    return acc.estimate(1.0, n=n, epsilon=epsilon)


def decay_rate(ns, probabilities) -> float:
    """Least-squares slope of ``-log P`` against ``n`` over the cells with ``P > 0``."""
    ns = np.asarray(ns, dtype=float)
    probabilities = np.asarray(probabilities, dtype=float)
    keep = probabilities > 0
    if keep.sum() < 2:
        raise ValueError("need at least two cells with positive probability")
    slope = np.polyfit(ns[keep], np.log(probabilities[keep]), 1)[0]
    return float(-slope)
