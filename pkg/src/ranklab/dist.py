"""Increment and sample-value laws, plus the seeded random streams used everywhere.

Every random draw in the package flows through an :class:`RngStream`.  A stream
is keyed by ``(seed, stream_id)`` and backed by numpy's Philox counter-based
generator, with the two integers used directly as the 128-bit Philox key.  Two
streams with the same key replay the same sequence; different keys give
independent sequences without any coordination between workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

_MASK64 = (1 << 64) - 1


class InfiniteMeanError(ValueError):
    """Raised when an operation needs a finite mean the law does not have."""


class Family(str, Enum):
    EXPONENTIAL = "exp"
    PARETO = "pareto"
    UNIFORM = "unif"
    DETERMINISTIC = "det"


_ARITY = {
    Family.EXPONENTIAL: 1,
    Family.PARETO: 2,
    Family.UNIFORM: 0,
    Family.DETERMINISTIC: 1,
}


@dataclass(frozen=True)
class DistributionSpec:
    """Immutable description of a nonnegative law.

    Parameters by family:

    * ``exp``: ``(rate,)``
    * ``pareto``: ``(alpha, scale)`` with survival ``(scale/x)**alpha`` for ``x >= scale``
    * ``unif``: no parameters, uniform on ``[0, 1]``
    * ``det``: ``(value,)``, a point mass

    Pareto laws with ``alpha <= 1`` are constructible (they are needed as
    negative cases) but every operation that consumes the mean rejects them.
    """

    family: Family
    params: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        family = Family(self.family)
        object.__setattr__(self, "family", family)
        params = tuple(float(v) for v in self.params)
        object.__setattr__(self, "params", params)
        if len(params) != _ARITY[family]:
            raise ValueError(f"{family.value} takes {_ARITY[family]} parameter(s), got {len(params)}")
        if any(not math.isfinite(v) for v in params):
            raise ValueError(f"non-finite parameter in {params}")
        if family is Family.EXPONENTIAL and params[0] <= 0:
            raise ValueError(f"exponential rate must be positive, got {params[0]}")
        if family is Family.PARETO and (params[0] <= 0 or params[1] <= 0):
            raise ValueError(f"pareto alpha and scale must be positive, got {params}")
        if family is Family.DETERMINISTIC and params[0] < 0:
            raise ValueError(f"deterministic value must be nonnegative, got {params[0]}")

    @classmethod
    def exponential(cls, rate: float = 1.0) -> "DistributionSpec":
        return cls(Family.EXPONENTIAL, (rate,))

    @classmethod
    def pareto(cls, alpha: float, scale: float = 1.0) -> "DistributionSpec":
        return cls(Family.PARETO, (alpha, scale))

    @classmethod
    def uniform(cls) -> "DistributionSpec":
        return cls(Family.UNIFORM, ())

    @classmethod
    def deterministic(cls, value: float) -> "DistributionSpec":
        return cls(Family.DETERMINISTIC, (value,))

    @classmethod
    def parse(cls, text: str) -> "DistributionSpec":
        """Parse ``family:p1,p2`` strings such as ``exp:1.0`` or ``pareto:2.5,1``.

        A Pareto spec with a single parameter gets ``scale = 1``.
        """
        name, _, rest = text.strip().partition(":")
        try:
            family = Family(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown distribution family {name!r} in {text!r}") from None
        params = tuple(float(v) for v in rest.split(",") if v.strip()) if rest else ()
        if family is Family.PARETO and len(params) == 1:
            params = (params[0], 1.0)
        return cls(family, params)

    def __str__(self) -> str:
        if not self.params:
            return self.family.value
        return f"{self.family.value}:" + ",".join(f"{v:g}" for v in self.params)


def mean(spec: DistributionSpec) -> float:
    """Exact mean of the law; raises :class:`InfiniteMeanError` when it is infinite."""
    if spec.family is Family.EXPONENTIAL:
        return 1.0 / spec.params[0]
    if spec.family is Family.PARETO:
        alpha, scale = spec.params
        if alpha <= 1:
            raise InfiniteMeanError(f"{spec} has infinite mean (alpha <= 1)")
        return alpha * scale / (alpha - 1)
    if spec.family is Family.UNIFORM:
        return 0.5
    value = spec.params[0]
    if value <= 0:
        raise ValueError(f"{spec} has zero mean; a positive mean is required")
    return value


def variance(spec: DistributionSpec) -> float:
    """Variance of the law, ``inf`` for Pareto with ``alpha <= 2``."""
    if spec.family is Family.EXPONENTIAL:
        return 1.0 / spec.params[0] ** 2
    if spec.family is Family.PARETO:
        alpha, scale = spec.params
        if alpha <= 2:
            return math.inf
        return scale**2 * alpha / ((alpha - 1) ** 2 * (alpha - 2))
    if spec.family is Family.UNIFORM:
        return 1.0 / 12.0
    return 0.0


def moment_finite(spec: DistributionSpec, q: float) -> bool:
    """Whether ``E xi**q`` is finite.  Only Pareto laws ever answer False (iff ``q >= alpha``)."""
    if not q > 0:
        raise ValueError(f"moment order must be positive, got {q}")
    if spec.family is Family.PARETO:
        return q < spec.params[0]
    return True


def is_heavy_tailed(spec: DistributionSpec) -> bool:
    return spec.family is Family.PARETO


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """A reproducible stream of random numbers owned by one consumer at a time.

    ``RngStream(seed, stream_id)`` wraps ``numpy.random.Philox`` keyed with
    ``(seed, stream_id)`` (both reduced mod 2**64).  :meth:`substream` derives
    child streams by mixing the parent id with the child index through
    splitmix64, so chunk ``i`` of a job always sees the same numbers no matter
    which worker runs it.
    """

    __slots__ = ("seed", "stream_id", "generator")

    def __init__(self, seed: int, stream_id: int = 0) -> None:
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def substream(self, index: int) -> "RngStream":
        child = _splitmix64(self.stream_id ^ _splitmix64(int(index) + 1))
        return RngStream(self.seed, child)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def sample_array(spec: DistributionSpec, rng: RngStream, size) -> np.ndarray:
    """Draw an array of iid values from ``spec``."""
    gen = rng.generator
    if spec.family is Family.EXPONENTIAL:
        return gen.standard_exponential(size) / spec.params[0]
    if spec.family is Family.PARETO:
        alpha, scale = spec.params
        return scale * np.exp(gen.standard_exponential(size) / alpha)
    if spec.family is Family.UNIFORM:
        return gen.random(size)
    return np.full(size, spec.params[0])


def sample(spec: DistributionSpec, rng: RngStream) -> float:
    """One draw from ``spec``."""
    return float(sample_array(spec, rng, 1)[0])
