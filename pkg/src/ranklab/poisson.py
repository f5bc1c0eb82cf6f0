"""Planar Poisson embedding of the infinite-horizon selection problem.

Atoms are ``(T_k, S_k)`` with ``S_k`` the partial sums of Exp(1) variables and
``T_k`` iid uniform arrival times on ``[0, 1]``.  Within ``[0,1] x [0, s_cap]``
this is a unit-rate Poisson process, and since ``S_1 < S_2 < ...`` the rank of
atom ``k`` among all s-values is ``k`` itself.  An observer sees atoms in time
order and never learns ranks directly.

A boundary rule stops at the earliest-arriving atom with ``s <= b(t)``.  When
no atom qualifies the episode is scored with the pessimistic surrogate rank
``(number of atoms with s <= s_cap) + 1`` and counted as a no-stop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Callable, Sequence

import numpy as np

from .dist import RngStream
from .parallel import DEFAULT_CHUNK, map_chunks
from .stats import MomentAccumulator, MomentEstimate


@dataclass(frozen=True)
class PoissonAtoms:
    """One configuration restricted to ``s <= s_cap``, sorted by arrival time."""

    t: np.ndarray
    s: np.ndarray
    k: np.ndarray
    s_cap: float

    def __len__(self) -> int:
        return int(self.t.size)


def sample_atoms(s_cap: float, rng: RngStream) -> PoissonAtoms:
    """Draw ``S_1, S_2, ...`` until the first exceeds ``s_cap``, attach uniform times."""
    if not s_cap > 0:
        raise ValueError("s_cap must be positive")
    gen = rng.generator
    block = max(16, math.ceil(s_cap + 4.0 * math.sqrt(s_cap)))
    sums = np.empty(0)
    total = 0.0
    while total <= s_cap:
        new = total + np.cumsum(gen.standard_exponential(block))
        sums = np.concatenate([sums, new])
        total = float(new[-1])
    s = sums[sums <= s_cap]
    t = gen.random(s.size)
    order = np.argsort(t, kind="stable")
    return PoissonAtoms(t[order], s[order], order + 1, float(s_cap))


def sample_atoms_batch(s_cap: float, count: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """``(s, t)`` arrays of shape ``(count, L)``; column ``j`` holds atom ``k = j + 1``.

    Entries with ``s > s_cap`` are set to ``inf`` (no atom).
    """
    if not s_cap > 0:
        raise ValueError("s_cap must be positive")
    gen = rng.generator
    width = max(16, math.ceil(s_cap + 8.0 * math.sqrt(s_cap) + 16))
    s = np.cumsum(gen.standard_exponential((count, width)), axis=1)
    while count and s[:, -1].min() <= s_cap:
        more = s[:, -1:] + np.cumsum(gen.standard_exponential((count, width)), axis=1)
        s = np.concatenate([s, more], axis=1)
    t = gen.random(s.shape)
    keep = s <= s_cap
    last = int(keep.sum(axis=1).max()) if count else 0
    s = np.where(keep, s, np.inf)[:, :last]
    return s, t[:, :last]


@dataclass(frozen=True)
class _Constant:
    # boundaries are module-level classes so rules pickle into worker processes
    c: float

    def __call__(self, t):
        return np.full(np.shape(t), self.c)


@dataclass(frozen=True)
class _Reciprocal:
    c: float
    s_cap: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            return np.minimum(self.c / (1.0 - t), self.s_cap)


class PoissonRule:
    """Stop at the first-arriving atom on or below the boundary ``b(t)``.

    The decision at time ``t`` uses only that atom's own ``(t, s)``, so the
    rule is adapted to the observer's information.  ``boundary`` must accept
    numpy arrays.
    """

    def __init__(self, boundary: Callable[[np.ndarray], np.ndarray], name: str):
        self.boundary = boundary
        self.name = name

    @classmethod
    def zero(cls) -> "PoissonRule":
        return cls(_Constant(0.0), "zero")

    @classmethod
    def constant(cls, c: float) -> "PoissonRule":
        return cls(_Constant(float(c)), f"const:{c:g}")

    @classmethod
    def reciprocal(cls, c: float, s_cap: float) -> "PoissonRule":
        """``b(t) = min(c / (1 - t), s_cap)``."""
        return cls(_Reciprocal(float(c), float(s_cap)), f"recip:{c:g}")

    @classmethod
    def parse(cls, text: str, s_cap: float) -> "PoissonRule":
        name, _, arg = text.partition(":")
        if name == "zero":
            return cls.zero()
        if name == "const":
            return cls.constant(float(arg))
        if name == "recip":
            return cls.reciprocal(float(arg), s_cap)
        raise ValueError(f"unknown boundary {text!r} (expected zero, const:c or recip:c)")

    def sup(self, points: int = 10_001) -> float:
        return float(np.max(self.boundary(np.linspace(0.0, 1.0, points))))

    def run_on_atoms(self, atoms: PoissonAtoms) -> tuple[int, float, float] | None:
        """Scan atoms in time order; return ``(rank, t, s)`` of the stopped atom or None."""
        for t, s, k in zip(atoms.t, atoms.s, atoms.k):
            if s <= float(self.boundary(np.array([t]))[0]):
                return int(k), float(t), float(s)
        return None


@dataclass
class PoissonEpisodes:
    rank: np.ndarray
    stopped_t: np.ndarray
    stopped_s: np.ndarray
    no_stop: np.ndarray
    atom_count: np.ndarray


def simulate_poisson_episodes(rule: PoissonRule, s_cap: float, count: int, rng: RngStream) -> PoissonEpisodes:
    if rule.sup() > s_cap * (1 + 1e-12):
        raise ValueError(f"boundary {rule.name} exceeds s_cap={s_cap}; truncation would censor stoppable atoms")
    s, t = sample_atoms_batch(s_cap, count, rng)
    counts = np.isfinite(s).sum(axis=1)
    stoppable = np.isfinite(s) & (s <= rule.boundary(t))
    first = np.where(stoppable, t, np.inf).argmin(axis=1) if s.shape[1] else np.zeros(count, dtype=int)
    rows = np.arange(count)
    no_stop = ~stoppable.any(axis=1) if s.shape[1] else np.ones(count, dtype=bool)
    rank = np.where(no_stop, counts + 1, first + 1)
    stopped_t = np.where(no_stop, np.nan, t[rows, first] if s.shape[1] else np.nan)
    stopped_s = np.where(no_stop, np.nan, s[rows, first] if s.shape[1] else np.nan)
    return PoissonEpisodes(rank, stopped_t, stopped_s, no_stop, counts)


def _rule_chunk(size, rng, rule, s_cap, p):
    ep = simulate_poisson_episodes(rule, s_cap, size, rng)
    return MomentAccumulator().add(ep.rank.astype(float) ** p), MomentAccumulator().add(ep.no_stop)


def run_poisson_rule(
    rule: PoissonRule,
    s_cap: float,
    p: float,
    trials: int,
    rng: RngStream,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
) -> MomentEstimate:
    """Estimate ``E[R_tau^p]``; ``notes`` carries the no-stop frequency and its SE."""
    if rule.sup() > s_cap * (1 + 1e-12):
        raise ValueError(f"boundary {rule.name} exceeds s_cap={s_cap}")
    func = partial(_rule_chunk, rule=rule, s_cap=s_cap, p=p)
    ranks, no_stop = MomentAccumulator(), MomentAccumulator()
    for r_acc, n_acc in map_chunks(func, trials, rng, workers=workers, chunk_size=chunk_size):
        ranks.merge(r_acc)
        no_stop.merge(n_acc)
    ns = no_stop.estimate(1.0)
    return ranks.estimate(p, no_stop_frequency=ns.mean, no_stop_se=ns.std_error, rule=rule.name)


def tune_reciprocal(
    cs: Sequence[float], s_cap: float, p: float, trials: int, rng: RngStream, workers: int = 1
) -> tuple[float, list[tuple[float, MomentEstimate]]]:
    """Grid search over ``c`` for ``b(t) = c / (1 - t)`` using one shared stream per candidate."""
    results = [
        (float(c), run_poisson_rule(PoissonRule.reciprocal(c, s_cap), s_cap, p, trials, RngStream(rng.seed, rng.stream_id), workers))
        for c in cs
    ]
    best = min(results, key=lambda item: item[1].mean)
    return best[0], results


def bottom_scaled_uniforms(n: int, m: int, count: int, rng: RngStream, rows: int = 256) -> np.ndarray:
    """``n`` times the ``m`` smallest of ``n`` direct uniforms, ``(count, m)``, sorted per row."""
    gen = rng.generator
    out = np.empty((count, m))
    for lo in range(0, count, rows):
        size = min(rows, count - lo)
        u = gen.random((size, n))
        out[lo : lo + size] = np.sort(np.partition(u, m - 1, axis=1)[:, :m], axis=1) * n
    return out
