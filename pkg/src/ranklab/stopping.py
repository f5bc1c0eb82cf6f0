"""Finite-horizon selection from an iid Uniform[0,1] sequence and the rank-based objective.

A rule sees ``X_1..X_j`` (never more) and says stop or go; step ``n`` always
stops.  Every rule can be simulated literally (:func:`run_episode`, or the
vectorized :func:`simulate_direct`).  The memoryless, relative-rank and
fixed-index rules also have exact lazy samplers that draw ``(tau, X_tau,
R_tau)`` from their joint law without materializing all ``n`` values, which
is what makes ``n = 10**5`` with a million episodes affordable.  The
lazy and literal paths are cross-checked in the test suite.

Ranks count from 1 at the smallest value.  Ties (probability zero) are
broken by index: an earlier equal value counts as smaller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Sequence

import numpy as np

from .dist import RngStream
from .parallel import DEFAULT_CHUNK, map_chunks
from .stats import MomentAccumulator, MomentEstimate


@dataclass(frozen=True)
class Episode:
    values: np.ndarray

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def ranks(self) -> np.ndarray:
        order = np.argsort(self.values, kind="stable")
        ranks = np.empty(self.n, dtype=np.int64)
        ranks[order] = np.arange(1, self.n + 1)
        return ranks


@dataclass(frozen=True)
class EpisodeOutcome:
    tau: int
    x_stopped: float
    rank: int


@dataclass(frozen=True)
class RuleEvaluation:
    """``E[R^p]`` and ``n^p E[X^p]`` estimated from the same episodes."""

    rank_moment: MomentEstimate
    scaled_value_moment: MomentEstimate
    n: int
    p: float
    trials: int
    rule_id: str = ""


def rank_in(values: np.ndarray, index: int) -> int:
    """Full-sample rank of ``values[index]`` (0-based index)."""
    x = values[index]
    return int(1 + np.count_nonzero(values < x) + np.count_nonzero(values[:index] == x))


class StoppingRule:
    """Base class.  ``decide`` gets the observed prefix only, so rules cannot look ahead."""

    rule_id = "rule"
    adapted = True

    def decide(self, prefix: np.ndarray, n: int) -> bool:
        raise NotImplementedError

    def decide_batch(self, prefixes: np.ndarray, n: int) -> np.ndarray:
        """Row-wise ``decide`` for a ``(trials, j)`` block of prefixes."""
        return np.array([self.decide(row, n) for row in prefixes], dtype=bool)

    def sample_outcomes(self, n: int, size: int, rng: RngStream):
        """``(tau, x, rank)`` arrays for ``size`` independent episodes."""
        return simulate_direct(self, n, size, rng)

    def __repr__(self) -> str:
        return self.rule_id


class FixedIndex(StoppingRule):
    def __init__(self, j: int):
        if j < 1:
            raise ValueError("index must be at least 1")
        self.j = int(j)
        self.rule_id = f"fixed:{self.j}"

    def decide(self, prefix, n):
        return len(prefix) >= self.j

    def decide_batch(self, prefixes, n):
        return np.full(prefixes.shape[0], prefixes.shape[1] >= self.j)

    def sample_outcomes(self, n, size, rng):
        gen = rng.generator
        tau = np.full(size, min(self.j, n), dtype=np.int64)
        x = gen.random(size)
        return tau, x, 1 + gen.binomial(n - 1, x)


@dataclass(frozen=True)
class _FamilyThreshold:
    # module-level so rules pickle into worker processes
    t0: float
    t1: float
    t2: float

    def __call__(self, j, n):
        return np.minimum(1.0, self.t0 / (n - np.asarray(j, dtype=float) + self.t1) + self.t2 / n)


@dataclass(frozen=True)
class _ConstantOverN:
    c: float

    def __call__(self, j, n):
        return np.full(np.shape(j), self.c / n)


class MemorylessThreshold(StoppingRule):
    """Stop at the first ``j`` with ``X_j <= h(j, n)``; earlier values are ignored.

    ``h`` must accept numpy arrays of step indices.
    """

    def __init__(self, h: Callable[[np.ndarray, int], np.ndarray], rule_id: str = "memoryless"):
        self.h = h
        self.rule_id = rule_id

    @classmethod
    def family(cls, theta: Sequence[float]) -> "MemorylessThreshold":
        """``h(j, n) = min(1, theta0 / (n - j + theta1) + theta2 / n)``."""
        t0, t1, t2 = (float(v) for v in theta)
        if t1 <= 0:
            raise ValueError("theta1 must be positive")
        return cls(_FamilyThreshold(t0, t1, t2), rule_id=f"memoryless:{t0:g},{t1:g},{t2:g}")

    @classmethod
    def constant_over_n(cls, c: float) -> "MemorylessThreshold":
        """``h(j, n) = c / n``."""
        return cls(_ConstantOverN(float(c)), rule_id=f"c_over_n:{c:g}")

    def thresholds(self, n: int) -> np.ndarray:
        h = np.clip(np.asarray(self.h(np.arange(1, n + 1), n), dtype=float), 0.0, 1.0)
        h = np.broadcast_to(h, (n,)).copy()
        h[-1] = 1.0
        return h

    def decide(self, prefix, n):
        j = len(prefix)
        return bool(prefix[-1] <= self.thresholds(n)[j - 1])

    def decide_batch(self, prefixes, n):
        j = prefixes.shape[1]
        return prefixes[:, -1] <= self.thresholds(n)[j - 1]

    def sample_outcomes(self, n, size, rng):
        h = self.thresholds(n)
        if n > 1 and np.any(np.diff(h[:-1]) < 0):
            return simulate_direct(self, n, size, rng)
        return _lazy_memoryless(h, size, rng)


def _first_stop(log_survival: np.ndarray, gen: np.random.Generator, size: int) -> np.ndarray:
    """Invert ``P(tau > j) = exp(log_survival[j-1])`` with one uniform per episode."""
    u = 1.0 - gen.random(size)
    tau = np.searchsorted(-log_survival, -np.log(u), side="right") + 1
    return np.minimum(tau, log_survival.size)


def _uniform_subsets(gen, owners, lo, width, sizes, large=32):
    """For each owner draw ``sizes[i]`` distinct integers from ``[lo[i], lo[i] + width[i])``.

    Returns ``(owner_of_each_draw, value)``.  Small requests are drawn in bulk
    and collisions redrawn until none remain (the procedure is symmetric under
    relabelling, so the resulting subset is uniform); large ones go one by one.
    """
    small = sizes <= large
    own = np.repeat(owners[small], sizes[small])
    base, span = np.repeat(lo[small], sizes[small]), np.repeat(width[small], sizes[small])
    offset = np.floor(gen.random(own.size) * span).astype(np.int64)
    while own.size:
        key = own * (int(span.max()) + 1) + offset
        order = np.argsort(key, kind="stable")
        dup = np.zeros(own.size, dtype=bool)
        dup[order[1:]] = key[order[1:]] == key[order[:-1]]
        if not dup.any():
            break
        offset[dup] = np.floor(gen.random(int(dup.sum())) * span[dup]).astype(np.int64)
    out_owner, out_value = [own], [base + offset]
    for i in np.flatnonzero(~small):
        picks = gen.choice(int(width[i]), size=int(sizes[i]), replace=False)
        out_owner.append(np.full(picks.size, owners[i]))
        out_value.append(lo[i] + picks)
    return np.concatenate(out_owner), np.concatenate(out_value)


def _lazy_memoryless(h: np.ndarray, size: int, rng: RngStream):
    """Exact joint draw of ``(tau, X_tau, R_tau)`` for nondecreasing thresholds ``h``.

    Given ``tau = j`` and ``X_j = x``, earlier values are uniform on ``(h_i, 1]``
    and later ones uniform on ``[0, 1]``, all independent.  The rank is
    ``1 + Binomial(n - j, x) + sum_{i<j} Bernoulli((x - h_i)^+ / (1 - h_i))``.
    The last sum is drawn by thinning a ``Binomial(m, x)`` candidate set, since
    every success probability is at most ``x``; indices with ``h_i = 0`` have
    probability exactly ``x`` and are drawn as one binomial.
    """
    gen = rng.generator
    n = h.size
    with np.errstate(divide="ignore"):
        log_surv = np.cumsum(np.log1p(-h))
    tau = _first_stop(log_surv, gen, size)
    x = h[tau - 1] * gen.random(size)
    later = gen.binomial(n - tau, x)
    head = h[:-1]
    eligible = np.minimum(np.searchsorted(head, x, side="left"), tau - 1)
    zeros = np.minimum(np.searchsorted(head, 0.0, side="right"), eligible)
    earlier = gen.binomial(zeros, x)
    width = eligible - zeros
    cand = gen.binomial(width, x)
    has = np.flatnonzero(cand > 0)
    if has.size:
        owner, idx = _uniform_subsets(gen, has, zeros[has], width[has], cand[has])
        hi, xo = head[idx], x[owner]
        keep = gen.random(owner.size) * xo * (1.0 - hi) < xo - hi
        earlier = earlier + np.bincount(owner[keep], minlength=size)
    return tau, x, 1 + earlier + later


class RelativeRankRule(StoppingRule):
    """Stop at step ``j`` when the relative rank of ``X_j`` among ``X_1..X_j`` is ``<= cutoffs[j-1]``."""

    def __init__(self, n: int, cutoffs: Sequence[int], rule_id: str | None = None):
        cutoffs = np.asarray(cutoffs, dtype=np.int64).copy()
        if cutoffs.size != n:
            raise ValueError("need one cutoff per step")
        cutoffs[-1] = n
        self.n = n
        self.cutoffs = np.clip(cutoffs, 0, np.arange(1, n + 1))
        self.rule_id = rule_id or f"relrank:{n}"

    def _check(self, n):
        if n != self.n:
            raise ValueError(f"rule built for n={self.n}, used with n={n}")

    def decide(self, prefix, n):
        self._check(n)
        j = len(prefix)
        r = 1 + int(np.count_nonzero(prefix[:-1] < prefix[-1]))
        return r <= self.cutoffs[j - 1]

    def decide_batch(self, prefixes, n):
        self._check(n)
        j = prefixes.shape[1]
        r = 1 + np.count_nonzero(prefixes[:, :-1] < prefixes[:, -1:], axis=1)
        return r <= self.cutoffs[j - 1]

    def sample_outcomes(self, n, size, rng):
        """Relative ranks are independent, uniform on ``{1..j}``; exploit that.

        Given a stop at ``j`` with relative rank ``r``, ``X_j ~ Beta(r, j - r + 1)``
        and the final rank is ``r + Binomial(n - j, X_j)``.
        """
        self._check(n)
        gen = rng.generator
        steps = np.arange(1, n + 1)
        with np.errstate(divide="ignore"):
            log_surv = np.cumsum(np.log1p(-self.cutoffs / steps))
        tau = _first_stop(log_surv, gen, size)
        r = 1 + np.floor(gen.random(size) * self.cutoffs[tau - 1]).astype(np.int64)
        x = gen.beta(r, tau - r + 1)
        return tau, x, r + gen.binomial(n - tau, x)


class FullInfoGridRule(StoppingRule):
    """Rule induced by the discretized full-information DP (``n <= 3``).

    The last decision step compares the exact stopping and continuation
    payoffs; step 1 of ``n = 3`` compares against the tabulated continuation
    value, linearly interpolated on the grid.
    """

    def __init__(self, n: int, grid: np.ndarray | None = None, continuation: np.ndarray | None = None):
        self.n = n
        self.grid = grid
        self.continuation = continuation
        self.rule_id = f"fullinfo:{n}"

    def decide(self, prefix, n):
        return bool(self.decide_batch(np.asarray(prefix, dtype=float)[None, :], n)[0])

    def decide_batch(self, prefixes, n):
        if n != self.n:
            raise ValueError(f"rule built for n={self.n}, used with n={n}")
        j = prefixes.shape[1]
        if j >= n:
            return np.ones(prefixes.shape[0], dtype=bool)
        stop = _stop_payoff(prefixes, n)
        if j == n - 1:
            return stop <= _last_continuation(prefixes, n)
        return stop <= np.interp(prefixes[:, 0], self.grid, self.continuation)


class OracleRule:
    """A non-adapted selection ``sigma_n``: with probability ``prob`` pick the global
    minimum, otherwise a uniform index.  It sees the whole sample."""

    adapted = False

    def __init__(self, prob: float = 0.5):
        self.prob = float(prob)
        self.rule_id = f"oracle_min:{self.prob:g}"

    def select(self, values: np.ndarray, gen: np.random.Generator) -> int:
        if gen.random() < self.prob:
            return int(np.argmin(values))
        return int(gen.integers(values.size))

    def sample_outcomes(self, n, size, rng):
        gen = rng.generator
        values = gen.random((size, n))
        pick_min = gen.random(size) < self.prob
        idx = np.where(pick_min, values.argmin(axis=1), gen.integers(0, n, size))
        x = values[np.arange(size), idx]
        return idx + 1, x, _ranks_of(values, idx, x)


def _ranks_of(values, idx, x):
    earlier = np.arange(values.shape[1])[None, :] < idx[:, None]
    smaller = (values < x[:, None]) | ((values == x[:, None]) & earlier)
    return 1 + np.count_nonzero(smaller, axis=1)


def _stop_payoff(prefixes: np.ndarray, n: int) -> np.ndarray:
    """Expected final rank when stopping on the last value of each prefix."""
    j = prefixes.shape[1]
    last = prefixes[:, -1]
    return 1.0 + np.count_nonzero(prefixes[:, :-1] < last[:, None], axis=1) + (n - j) * last


def _last_continuation(prefixes: np.ndarray, n: int) -> np.ndarray:
    """Expected rank of ``X_n`` given ``X_1..X_{n-1}`` (forced stop next)."""
    return 1.0 + (1.0 - prefixes).sum(axis=1)


def simulate_direct(rule: StoppingRule, n: int, size: int, rng: RngStream):
    """Literal simulation: draw all values, ask the rule step by step, rank by comparison."""
    values = rng.generator.random((size, n))
    tau = np.full(size, n, dtype=np.int64)
    open_ = np.ones(size, dtype=bool)
    for j in range(1, n):
        rows = np.flatnonzero(open_)
        if not rows.size:
            break
        stop = rule.decide_batch(values[rows, :j], n)
        tau[rows[stop]] = j
        open_[rows[stop]] = False
    idx = tau - 1
    x = values[np.arange(size), idx]
    return tau, x, _ranks_of(values, idx, x)


def run_episode(rule, n: int, rng: RngStream) -> EpisodeOutcome:
    """One episode, played literally step by step."""
    gen = rng.generator
    values = gen.random(n)
    if not getattr(rule, "adapted", True):
        idx = rule.select(values, gen)
        return EpisodeOutcome(idx + 1, float(values[idx]), rank_in(values, idx))
    tau = n
    for j in range(1, n):
        if rule.decide(values[:j].copy(), n):
            tau = j
            break
    return EpisodeOutcome(tau, float(values[tau - 1]), rank_in(values, tau - 1))


def _evaluate_chunk(size, rng, rule, n, p, method):
    if method == "direct":
        tau, x, rank = simulate_direct(rule, n, size, rng)
    else:
        tau, x, rank = rule.sample_outcomes(n, size, rng)
    ranks = MomentAccumulator().add(np.asarray(rank, dtype=float) ** p)
    scaled = MomentAccumulator().add((n * np.asarray(x, dtype=float)) ** p)
    return ranks, scaled


def evaluate_rule(
    rule,
    n: int,
    p: float,
    trials: int,
    rng: RngStream,
    workers: int = 1,
    method: str = "auto",
    chunk_size: int = DEFAULT_CHUNK,
) -> RuleEvaluation:
    """Estimate ``E[R_tau^p]`` and ``n^p E[X_tau^p]`` on a shared episode stream.

    ``method="direct"`` forces literal simulation; ``"auto"`` uses the rule's
    fastest exact sampler.
    """
    if trials < 1000:
        raise ValueError("evaluate_rule needs at least 1000 trials")
    if method not in ("auto", "direct"):
        raise ValueError(f"unknown method {method!r}")
    func = partial(_evaluate_chunk, rule=rule, n=n, p=p, method=method)
    ranks, scaled = MomentAccumulator(), MomentAccumulator()
    for r_acc, s_acc in map_chunks(func, trials, rng, workers=workers, chunk_size=chunk_size):
        ranks.merge(r_acc)
        scaled.merge(s_acc)
    return RuleEvaluation(ranks.estimate(p), scaled.estimate(p), n, p, trials, rule.rule_id)


def dp_relative_rank(n: int) -> tuple[RelativeRankRule, float]:
    """Optimal rank-only rule by backward induction.

    Stopping at step ``j`` on relative rank ``r`` has expected final rank
    ``r (n + 1) / (j + 1)``; ``c[j]`` is the optimal value from step ``j`` on.
    Ties between stopping and continuing are resolved by stopping.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    cutoffs = np.empty(n, dtype=np.int64)
    cutoffs[-1] = n
    value = (n + 1) / 2.0
    for j in range(n - 1, 0, -1):
        scale = (n + 1) / (j + 1)
        t = min(j, math.floor(value / scale * (1 + 1e-12)))
        cutoffs[j - 1] = t
        value = (scale * t * (t + 1) / 2.0 + (j - t) * value) / j
    return RelativeRankRule(n, cutoffs, rule_id=f"dp_relrank:{n}"), value


@dataclass(frozen=True)
class FullInfoSolution:
    rule: FullInfoGridRule
    value: float
    thresholds: tuple[float, ...]
    grid_size: int


def _crossings(grid, diff):
    """Linear-interpolated zeros of ``diff`` sampled on ``grid``."""
    s = np.sign(diff)
    idx = np.flatnonzero(s[:-1] * s[1:] < 0)
    return tuple(float(grid[i] - diff[i] * (grid[i + 1] - grid[i]) / (diff[i + 1] - diff[i])) for i in idx)


def dp_full_info(n: int, grid_size: int = 10_000, row_block: int = 512) -> FullInfoSolution:
    """Discretized full-information backward induction for ``n <= 3``.

    Values live on the midpoint grid ``(i + 1/2) / grid_size``.  Expectations
    over the next observation are midpoint-rule averages over that grid.
    """
    if n > 3:
        raise ValueError(
            "full-information DP is only tabulated for n <= 3; use the memoryless or relative-rank rule families for larger n"
        )
    if n < 1:
        raise ValueError("n must be at least 1")
    if grid_size < 1000:
        raise ValueError("grid_size must be at least 1000")
    grid = (np.arange(grid_size) + 0.5) / grid_size
    if n == 1:
        return FullInfoSolution(FullInfoGridRule(1), 1.0, (), grid_size)
    if n == 2:
        stop, cont = 1.0 + grid, 2.0 - grid
        value = float(np.minimum(stop, cont).mean())
        return FullInfoSolution(FullInfoGridRule(2), value, _crossings(grid, stop - cont), grid_size)
    cont1 = np.empty(grid_size)
    for lo in range(0, grid_size, row_block):
        x1 = grid[lo : lo + row_block, None]
        x2 = grid[None, :]
        stop2 = 1.0 + (x1 < x2) + x2
        cont2 = 3.0 - x1 - x2
        cont1[lo : lo + row_block] = np.minimum(stop2, cont2).mean(axis=1)
    stop1 = 1.0 + 2.0 * grid
    value = float(np.minimum(stop1, cont1).mean())
    rule = FullInfoGridRule(3, grid, cont1)
    return FullInfoSolution(rule, value, _crossings(grid, stop1 - cont1), grid_size)


@dataclass
class SearchResult:
    theta: tuple[float, ...]
    evaluation: RuleEvaluation
    objective: float
    evaluations: int
    trace: list = field(default_factory=list)
    plateau: bool = False


def optimize_memoryless(
    n: int,
    p: float,
    budget: int,
    rng: RngStream,
    theta0: Sequence[float] = (2.0, 1.0, 0.0),
    step: Sequence[float] = (0.5, 0.5, 0.5),
    min_step: float = 1e-3,
    trials: int = 200_000,
    validation_trials: int | None = None,
    fixed: Sequence[int] = (),
    workers: int = 1,
) -> SearchResult:
    """Compass (pattern) search over ``theta`` for :meth:`MemorylessThreshold.family`.

    Schedule: poll ``theta +- step_i e_i`` for each free axis in order, move to
    the best strict improvement, otherwise halve every step.  Stops when the
    evaluation budget is spent or all steps drop below ``min_step``.  All
    candidates reuse one episode stream (common random numbers).  Coordinates
    are kept at ``theta0 >= 0``, ``theta1 >= 1e-3``, ``theta2 >= 0``; indices in
    ``fixed`` never move.  The returned evaluation is recomputed on a fresh
    stream so it carries no selection bias.
    """
    crn_seed, crn_id = rng.seed, rng.substream(0).stream_id
    lower = np.array([0.0, 1e-3, 0.0])
    free = [i for i in range(3) if i not in set(fixed)]

    def objective(theta):
        rule = MemorylessThreshold.family(theta)
        ev = evaluate_rule(rule, n, p, trials, RngStream(crn_seed, crn_id), workers=workers)
        return ev.rank_moment.mean

    theta = np.maximum(np.asarray(theta0, dtype=float), lower)
    steps = np.asarray(step, dtype=float).copy()
    best = objective(theta)
    used = 1
    trace = [(tuple(theta), best)]
    plateau = False
    while used < budget and steps[free].max() >= min_step:
        candidates = []
        for i in free:
            for sign in (1.0, -1.0):
                cand = theta.copy()
                cand[i] = max(cand[i] + sign * steps[i], lower[i])
                if not np.array_equal(cand, theta):
                    candidates.append(cand)
        improved = None
        for cand in candidates:
            if used >= budget:
                break
            val = objective(cand)
            used += 1
            trace.append((tuple(cand), val))
            if val < best and (improved is None or val < improved[1]):
                improved = (cand, val)
        if improved is None:
            steps /= 2.0
            plateau = True
        else:
            theta, best = improved
            plateau = False
    final = evaluate_rule(
        MemorylessThreshold.family(theta), n, p, validation_trials or trials, rng.substream(1), workers=workers
    )
    return SearchResult(tuple(float(v) for v in theta), final, best, used, trace, plateau)
