"""Random walks with negative drift and the supremum ``M = sup_{k>=0} (S_k - lam*k)``.

The sampler walks each path in vectorized blocks until a drift certificate
fires: the drifted walk has fallen ``margin`` below its running maximum and a
burn-in of ``10 * margin / (lam - mu)`` steps has elapsed.  Paths that reach
``hard_cap`` steps first are flagged.

For Pareto increments the certificate alone truncates the tail of ``M``: a
single late jump can still beat the running maximum with polynomially small
probability, and those late jumps are exactly what makes ``E M**p`` depend on
``E xi**(p+1)``.  With ``tail_skip`` on, a certified path keeps going in
fast-forward mode.  It jumps straight to the next increment exceeding half the
current drop below the maximum (geometric waiting time), moves the walk over
the skipped light increments (exact sum for short gaps, normal approximation
for long ones) and either resumes step-by-step simulation when the walk comes
back within ``margin`` of the maximum, or stops once the integrated-tail bound
on any future improvement falls below ``skip_tolerance``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import partial

import numpy as np

from . import dist
from .dist import DistributionSpec, Family, RngStream
from .parallel import DEFAULT_CHUNK, map_chunks
from .stats import MomentAccumulator, MomentEstimate

BLOCK = 256
ROWS = 4096
DEFAULT_HARD_CAP = 1_000_000
SKIP_TOLERANCE = 1e-9
SHORT_GAP = 64


class StopReason(str, Enum):
    DRIFT_CERTIFICATE = "DriftCertificate"
    HARD_CAP = "HardCap"


@dataclass(frozen=True)
class WalkPath:
    """A realized stretch ``xi_1..xi_K`` of the walk with its partial sums (``S_0 = 0`` implicit)."""

    increments: np.ndarray
    partial_sums: np.ndarray

    @classmethod
    def from_increments(cls, increments) -> "WalkPath":
        increments = np.asarray(increments, dtype=float)
        return cls(increments, np.cumsum(increments))

    @property
    def K(self) -> int:
        return int(self.increments.size)

    def drifted(self, lam: float) -> np.ndarray:
        """``S_k - lam*k`` for ``k = 1..K``."""
        return self.partial_sums - lam * np.arange(1, self.K + 1)


@dataclass(frozen=True)
class SupremumSample:
    value: float
    argmax_index: int
    lam: float
    truncated_at: int
    stop_reason: StopReason
    coupling: object = None


@dataclass
class SupremumBatch:
    """Column view of many supremum samples sharing one ``lam``.

    ``truncated_at`` is float64 because fast-forwarded paths can run past 2**63 steps.
    """

    values: np.ndarray
    argmax_index: np.ndarray
    truncated_at: np.ndarray
    hard_capped: np.ndarray
    lam: float

    def __len__(self) -> int:
        return int(self.values.size)

    def __getitem__(self, i: int) -> SupremumSample:
        reason = StopReason.HARD_CAP if self.hard_capped[i] else StopReason.DRIFT_CERTIFICATE
        return SupremumSample(
            float(self.values[i]), int(self.argmax_index[i]), self.lam, int(self.truncated_at[i]), reason
        )

    @property
    def hard_cap_fraction(self) -> float:
        return float(self.hard_capped.mean()) if len(self) else 0.0

    @classmethod
    def concat(cls, batches: list["SupremumBatch"]) -> "SupremumBatch":
        return cls(
            np.concatenate([b.values for b in batches]),
            np.concatenate([b.argmax_index for b in batches]),
            np.concatenate([b.truncated_at for b in batches]),
            np.concatenate([b.hard_capped for b in batches]),
            batches[0].lam,
        )


def _check_lambda(spec: DistributionSpec, lam: float) -> float:
    mu = dist.mean(spec)
    if not lam > mu:
        raise ValueError(f"lambda={lam} must exceed the increment mean {mu}; the supremum is a.s. infinite otherwise")
    return lam - mu


def default_margin(spec: DistributionSpec, lam: float) -> float:
    """``30 / (lam - mu) * max(1, sd)``, with the mean standing in for an infinite sd."""
    gap = _check_lambda(spec, lam)
    sd = math.sqrt(dist.variance(spec))
    if not math.isfinite(sd):
        sd = dist.mean(spec)
    return 30.0 / gap * max(1.0, sd)


def burn_in(spec: DistributionSpec, lam: float, margin: float) -> int:
    return math.ceil(10.0 * margin / _check_lambda(spec, lam))


class _State:
    """Per-path walk state for one batch of rows."""

    def __init__(self, rows: int):
        self.cur = np.zeros(rows)
        self.mx = np.zeros(rows)
        self.arg = np.zeros(rows)
        self.k = np.zeros(rows)
        self.capped = np.zeros(rows, dtype=bool)


def _advance(st, active, x, lam, margin, burn, hard_cap):
    """Feed one block of increments ``x`` (rows aligned with ``active``) into ``st``.

    Returns the rows that are still running afterwards.
    """
    width = x.shape[1]
    w = st.cur[active, None] + np.cumsum(x - lam, axis=1)
    rm = np.maximum.accumulate(np.maximum(w, st.mx[active, None]), axis=1)
    before = np.concatenate([st.mx[active, None], rm[:, :-1]], axis=1)
    ks = st.k[active, None] + np.arange(1, width + 1, dtype=float)
    argrun = np.maximum(st.arg[active, None], np.maximum.accumulate(np.where(w > before, ks, -1.0), axis=1))
    cert = (rm - w >= margin) & (ks >= burn)
    stop = cert | (ks >= hard_cap)
    hit = stop.any(axis=1)
    pos = np.where(hit, stop.argmax(axis=1), width - 1)
    r = np.arange(active.size)
    st.cur[active] = w[r, pos]
    st.mx[active] = rm[r, pos]
    st.arg[active] = argrun[r, pos]
    st.k[active] = ks[r, pos]
    st.capped[active] |= hit & ~cert[r, pos]
    return active[~hit]


def _direct(spec, lam, st, rows, rng, margin, burn, hard_cap, draw_all):
    """Step rows ``rows`` of ``st`` until certificate or hard cap.

    With ``draw_all`` every block draws increments for the whole batch, so a
    path's increments depend only on its row and block number, not on when
    other paths stop.
    """
    total = st.cur.size
    active = np.asarray(rows)
    while active.size:
        if draw_all:
            x = dist.sample_array(spec, rng, (total, BLOCK))[active]
        else:
            x = dist.sample_array(spec, rng, (active.size, BLOCK))
        active = _advance(st, active, x, lam, margin, burn, hard_cap)


def _pareto_light_moments(alpha, scale, bound):
    """Mean and variance of ``xi`` conditioned on ``xi <= bound`` for Pareto(alpha, scale)."""
    t = scale / bound
    mass = 1.0 - t**alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        m1 = alpha * scale / (alpha - 1) * (1.0 - t ** (alpha - 1)) / mass
        if alpha == 2:
            raw2 = 2.0 * scale**2 * np.log(bound / scale)
        else:
            raw2 = alpha * scale**2 / (alpha - 2) * (1.0 - t ** (alpha - 2))
        var = raw2 / mass - m1**2
    # bound == scale leaves no light part at all
    return np.where(mass > 0, m1, scale), np.where(mass > 0, np.maximum(var, 0.0), 0.0)


def improvement_bound(spec: DistributionSpec, lam: float, drop) -> np.ndarray:
    """Integrated-tail bound ``(1/(lam-mu)) * int_drop^inf P(xi > y) dy`` on ever regaining ``drop``."""
    gap = _check_lambda(spec, lam)
    alpha, scale = spec.params
    drop = np.maximum(np.asarray(drop, dtype=float), scale)
    return scale**alpha * drop ** (1.0 - alpha) / ((alpha - 1.0) * gap)


def _fast_forward(spec, lam, st, rows, rng, margin, tolerance):
    """Advance certified heavy-tailed rows; return rows that came back near their maximum."""
    alpha, scale = spec.params
    gen = rng.generator
    active = np.asarray(rows)
    back = []
    while active.size:
        drop = st.mx[active] - st.cur[active]
        done = improvement_bound(spec, lam, drop) < tolerance
        active, drop = active[~done], drop[~done]
        if not active.size:
            break
        bound = np.maximum(drop / 2.0, scale)
        q = (scale / bound) ** alpha
        u = 1.0 - gen.random(active.size)
        with np.errstate(divide="ignore"):
            gaps = np.where(q >= 1.0, 1.0, 1.0 + np.floor(np.log(u) / np.log1p(-q)))
        light_n = gaps - 1.0
        m1, var = _pareto_light_moments(alpha, scale, bound)
        light = light_n * m1 + np.sqrt(light_n * var) * gen.standard_normal(active.size)
        short = light_n <= SHORT_GAP
        if short.any():
            # exact sum of short runs of xi | xi <= bound via inverse CDF
            idx = np.flatnonzero(short)
            u2 = gen.random((idx.size, SHORT_GAP))
            tb = (scale / bound[idx, None]) ** alpha
            draws = scale * (1.0 - u2 * (1.0 - tb)) ** (-1.0 / alpha)
            mask = np.arange(SHORT_GAP)[None, :] < light_n[idx, None]
            light[idx] = (draws * mask).sum(axis=1)
        light = np.maximum(light, 0.0)
        jump = bound * np.exp(gen.standard_exponential(active.size) / alpha)
        st.cur[active] += light - lam * light_n + jump - lam
        st.k[active] += gaps
        new_max = st.cur[active] > st.mx[active]
        st.mx[active] = np.where(new_max, st.cur[active], st.mx[active])
        st.arg[active] = np.where(new_max, st.k[active], st.arg[active])
        near = st.cur[active] > st.mx[active] - margin
        back.append(active[near])
        active = active[~near]
    return np.concatenate(back) if back else np.empty(0, dtype=int)


def _simulate_rows(spec, lam, rows, rng, margin, burn, hard_cap, tail_skip, tolerance):
    st = _State(rows)
    everything = np.arange(rows)
    _direct(spec, lam, st, everything, rng.substream(0), margin, burn, hard_cap, draw_all=True)
    if tail_skip:
        ff_rng, revisit_rng = rng.substream(1), rng.substream(2)
        pending = everything[~st.capped]
        while pending.size:
            came_back = _fast_forward(spec, lam, st, pending, ff_rng, margin, tolerance)
            if not came_back.size:
                break
            _direct(spec, lam, st, came_back, revisit_rng, margin, 0, math.inf, draw_all=False)
            pending = came_back
    return SupremumBatch(st.mx.copy(), st.arg.copy(), st.k.copy(), st.capped.copy(), lam)


def simulate_suprema(
    spec: DistributionSpec,
    lam: float,
    count: int,
    rng: RngStream,
    margin: float | None = None,
    hard_cap: int = DEFAULT_HARD_CAP,
    min_steps: int = 0,
    tail_skip: bool | None = None,
    skip_tolerance: float = SKIP_TOLERANCE,
) -> SupremumBatch:
    """Draw ``count`` independent realizations of ``M_lam`` (vectorized).

    ``min_steps`` forces every path to run at least that many steps before the
    certificate may fire.  ``tail_skip`` defaults to on for Pareto increments.
    """
    _check_lambda(spec, lam)
    if margin is None:
        margin = default_margin(spec, lam)
    if not margin > 0:
        raise ValueError("margin must be positive")
    if hard_cap < 1:
        raise ValueError("hard_cap must be at least 1")
    if tail_skip is None:
        tail_skip = dist.is_heavy_tailed(spec)
    if tail_skip and spec.family is not Family.PARETO:
        raise ValueError("tail_skip is only implemented for Pareto increments")
    burn = max(burn_in(spec, lam, margin), int(min_steps))
    batches = [
        _simulate_rows(spec, lam, min(ROWS, count - start), rng.substream(start // ROWS + 1), margin, burn, hard_cap, tail_skip, skip_tolerance)
        for start in range(0, count, ROWS)
    ]
    if not batches:
        empty = np.empty(0)
        return SupremumBatch(empty, empty, empty, np.empty(0, dtype=bool), lam)
    return SupremumBatch.concat(batches)


def simulate_supremum(
    spec: DistributionSpec,
    lam: float,
    rng: RngStream,
    margin: float | None = None,
    hard_cap: int = DEFAULT_HARD_CAP,
    **kwargs,
) -> SupremumSample:
    """One realization of ``M_lam``; see :func:`simulate_suprema`."""
    return simulate_suprema(spec, lam, 1, rng, margin=margin, hard_cap=hard_cap, **kwargs)[0]


def supremum_of_path(path: WalkPath, lam: float) -> SupremumSample:
    """``max(0, max_k S_k - lam*k)`` over a fixed, fully retained path."""
    drifted = path.drifted(lam)
    if drifted.size and drifted.max() > 0:
        i = int(np.argmax(drifted))
        value, arg = float(drifted[i]), i + 1
    else:
        value, arg = 0.0, 0
    return SupremumSample(value, arg, lam, path.K, StopReason.HARD_CAP)


def walk_with_supremum(
    spec: DistributionSpec,
    lam: float,
    rng: RngStream,
    margin: float | None = None,
    hard_cap: int = DEFAULT_HARD_CAP,
    min_steps: int = 0,
) -> tuple[WalkPath, SupremumSample]:
    """Simulate one path step by step and keep it, together with its certified supremum.

    No fast-forward here: the supremum is taken over exactly the retained
    increments, which is what pathwise checks need.
    """
    gap = _check_lambda(spec, lam)
    if margin is None:
        margin = default_margin(spec, lam)
    burn = max(math.ceil(10.0 * margin / gap), int(min_steps))
    chunks = []
    cur = mx = 0.0
    arg = k = 0
    reason = StopReason.HARD_CAP
    while k < hard_cap:
        x = dist.sample_array(spec, rng, BLOCK)
        w = cur + np.cumsum(x - lam)
        for j, wj in enumerate(w):
            k += 1
            if wj > mx:
                mx, arg = float(wj), k
            if (mx - wj >= margin and k >= burn) or k >= hard_cap:
                if mx - wj >= margin and k >= burn:
                    reason = StopReason.DRIFT_CERTIFICATE
                chunks.append(x[: j + 1])
                return _retained(chunks, lam, reason)
        chunks.append(x)
        cur = float(w[-1])
    return _retained(chunks, lam, reason)


def _retained(chunks, lam: float, reason: StopReason) -> tuple[WalkPath, SupremumSample]:
    # recompute from the stored partial sums so M >= S_k - lam*k holds bit for bit
    path = WalkPath.from_increments(np.concatenate(chunks))
    return path, replace(supremum_of_path(path, lam), stop_reason=reason)


def _suprema_chunk(size, rng, spec, lam, sim_kwargs):
    return simulate_suprema(spec, lam, size, rng, **sim_kwargs)


def sample_suprema(
    spec: DistributionSpec,
    lam: float,
    n_samples: int,
    rng: RngStream,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
    **sim_kwargs,
) -> SupremumBatch:
    """Chunked, optionally parallel version of :func:`simulate_suprema`.

    Results depend on ``(rng, n_samples, chunk_size)`` only, never on ``workers``.
    """
    func = partial(_suprema_chunk, spec=spec, lam=lam, sim_kwargs=sim_kwargs)
    return SupremumBatch.concat(map_chunks(func, n_samples, rng, workers=workers, chunk_size=chunk_size))


def estimate_moment_M(
    spec: DistributionSpec,
    lam: float,
    p: float,
    n_samples: int,
    rng: RngStream,
    workers: int = 1,
    **sim_kwargs,
) -> MomentEstimate:
    """Monte Carlo estimate of ``E M_lam**p``.

    ``notes['hard_cap_fraction']`` is always present; the estimate is marked
    unreliable when more than 1% of paths ended on the hard cap.
    """
    if not p > 0:
        raise ValueError("p must be positive")
    batch = sample_suprema(spec, lam, n_samples, rng, workers=workers, **sim_kwargs)
    frac = batch.hard_cap_fraction
    acc = MomentAccumulator().add(batch.values**p)
    return acc.estimate(p, hard_cap_fraction=frac, unreliable=frac > 0.01)


S_LO = 0.05
S_HI = 0.15
MIN_CURVE_POINTS = 8


class Verdict(str, Enum):
    FINITE = "Finite"
    INFINITE = "Infinite"
    UNDECIDED = "Undecided"


@dataclass(frozen=True)
class FinitenessVerdict:
    verdict: Verdict
    growth_slope: float
    subsample_curve: tuple[tuple[int, float], ...]


def subsample_curve(values, p: float, sizes=None, points: int = 10, smallest: int = 1000) -> list[tuple[int, float]]:
    """Running mean of ``values**p`` at log-spaced prefix sizes.

    Default sizes run from ``smallest`` to ``len(values)`` in ``points`` steps.
    """
    z = np.asarray(values, dtype=float) ** p
    if sizes is None:
        if z.size < smallest:
            raise ValueError(f"need at least {smallest} values")
        sizes = np.unique(np.logspace(math.log10(smallest), math.log10(z.size), points).astype(int))
    sizes = np.asarray(sizes, dtype=int)
    if sizes.min() < 1 or sizes.max() > z.size:
        raise ValueError("sample sizes must lie in 1..len(values)")
    running = np.cumsum(z)[sizes - 1] / sizes
    return [(int(s), float(r)) for s, r in zip(sizes, running)]


def classify_finiteness(curve, s_lo: float = S_LO, s_hi: float = S_HI) -> FinitenessVerdict:
    """Slope of ``log(running moment)`` against ``log(sample size)``, thresholded.

    ``slope <= s_lo`` is Finite, ``slope >= s_hi`` Infinite, anything between
    Undecided.  An all-zero curve is Finite with slope 0.
    """
    curve = tuple((int(s), float(m)) for s, m in curve)
    if len(curve) < MIN_CURVE_POINTS:
        raise ValueError(f"curve needs at least {MIN_CURVE_POINTS} sample sizes, got {len(curve)}")
    sizes = np.array([s for s, _ in curve], dtype=float)
    moments = np.array([m for _, m in curve])
    if np.any(sizes < 1) or np.any(moments < 0) or np.unique(sizes).size != sizes.size:
        raise ValueError("curve needs distinct positive sizes and nonnegative moments")
    if np.all(moments == 0):
        return FinitenessVerdict(Verdict.FINITE, 0.0, curve)
    if np.any(moments == 0):
        # a running mean that is still zero has not seen the law yet
        keep = moments > 0
        if keep.sum() < 2:
            return FinitenessVerdict(Verdict.UNDECIDED, math.nan, curve)
        sizes, moments = sizes[keep], moments[keep]
    slope = float(np.polyfit(np.log(sizes), np.log(moments), 1)[0])
    if slope <= s_lo:
        verdict = Verdict.FINITE
    elif slope >= s_hi:
        verdict = Verdict.INFINITE
    else:
        verdict = Verdict.UNDECIDED
    return FinitenessVerdict(verdict, slope, curve)


def _mgf_drifted(spec: DistributionSpec, lam: float, theta: float) -> float:
    """``E exp(theta * (xi - lam))``; infinite where the transform diverges."""
    if spec.family is Family.EXPONENTIAL:
        rate = spec.params[0]
        return math.inf if theta >= rate else rate / (rate - theta) * math.exp(-theta * lam)
    if spec.family is Family.UNIFORM:
        return math.expm1(theta) / theta * math.exp(-theta * lam)
    if spec.family is Family.DETERMINISTIC:
        return math.exp(theta * (spec.params[0] - lam))
    raise ValueError("heavy-tailed increments have no exponential moments")


def lundberg_root(spec: DistributionSpec, lam: float, tol: float = 1e-12) -> float:
    """Positive root ``theta`` of ``E exp(theta (xi - lam)) = 1`` by bisection."""
    _check_lambda(spec, lam)
    if spec.family is Family.DETERMINISTIC or (spec.family is Family.UNIFORM and lam >= 1.0):
        # increments never exceed lam, the drifted walk never rises
        return math.inf
    if spec.family is Family.EXPONENTIAL:
        hi = spec.params[0]
    else:
        hi = 1.0
        while _mgf_drifted(spec, lam, hi) < 1.0:
            hi *= 2.0
    lo = 0.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if _mgf_drifted(spec, lam, mid) < 1.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def fit_tail_exponent(values, q_lo: float = 0.9, q_hi: float = 0.999) -> float:
    """Exponential tail rate from least squares on ``log`` empirical survival.

    Uses the order statistics between the ``q_lo`` and ``q_hi`` quantiles and
    returns minus the fitted slope.
    """
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    if not 0 < q_lo < q_hi < 1:
        raise ValueError("need 0 < q_lo < q_hi < 1")
    i = np.arange(int(math.ceil(q_lo * n)), int(math.floor(q_hi * n)))
    if i.size < 10:
        raise ValueError("too few points in the quantile window")
    survival = (n - i) / n
    return float(-np.polyfit(x[i], np.log(survival), 1)[0])
