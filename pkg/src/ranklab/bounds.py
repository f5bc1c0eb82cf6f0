"""Pathwise and aggregate checks of the inequality chain relating values and ranks.

Three inequalities are checked:

* drift chain: ``S_s**p <= (M + lam*s)**p <= c_p * (M**p + lam**p * s**p)``,
  which holds because ``M >= S_s - lam*s`` for every retained ``s``;
* decomposition: with ``Y_k = S_k / S_n`` and ``A_n = {n / S_n > 1 + eps}``,
  ``n**p Y_k**p <= n**p 1{A_n} + c_p (1+eps)**p (M**p + lam**p k**p)``;
  off ``A_n`` this goes through ``n**p Y_k**p <= (1+eps)**p S_k**p``;
* limsup bound: ``n**p E[X**p] <= c_p lam**p E[R**p] + c_p E[M**p]`` for a
  stopping rule, compared in expectation within 4 combined standard errors.

The pathwise checks compare floats directly.  A check is violated only when
``slack < -1e-12 * max(|lhs|, |rhs|)``, which absorbs rounding and nothing else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import partial
from typing import Sequence

import numpy as np

from . import walk
from .dist import DistributionSpec, RngStream
from .orderstat import Normalization, OrderStatSample, event_An
from .parallel import DEFAULT_CHUNK, map_chunks
from .stopping import evaluate_rule
from .walk import SupremumSample, WalkPath

RELATIVE_TOLERANCE = 1e-12
SE_MULTIPLIER = 4.0
EXP1 = DistributionSpec.exponential(1.0)


def c_p(p: float) -> float:
    """Power-mean constant ``max(2**(p-1), 1)``, so ``(a+b)**p <= c_p (a**p + b**p)``."""
    if not p > 0:
        raise ValueError("p must be positive")
    return max(2.0 ** (p - 1.0), 1.0)


class BoundName(str, Enum):
    DRIFT_CHAIN = "DriftChain"
    DECOMPOSITION = "Decomposition"
    AGGREGATE_DECOMPOSITION = "AggregateDecomposition"
    LIMSUP = "LimsupBound"


@dataclass(frozen=True)
class BoundReport:
    """One inequality ``lhs <= rhs``.

    ``violated`` is set when the slack falls below ``-tolerance``.  For pathwise
    checks the tolerance is the rounding allowance; for estimated quantities it
    is ``4`` combined standard errors.  ``undecided`` marks comparisons whose
    inputs were too unstable to support a verdict.
    """

    name: BoundName
    lhs: float
    rhs: float
    slack: float
    params: dict
    violated: bool
    tolerance: float = 0.0
    undecided: bool = False

    def params_text(self) -> str:
        return ";".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.params.items())


def _rounding(lhs, rhs):
    return RELATIVE_TOLERANCE * np.maximum(np.abs(lhs), np.abs(rhs))


def _below(lhs, rhs):
    """Elementwise ``lhs > rhs`` beyond rounding."""
    return rhs - lhs < -_rounding(lhs, rhs)


def chain_terms(s_sigma, m, sigma, lam: float, p: float):
    """Vectorized ``(S_s**p, (M + lam*s)**p, c_p (M**p + lam**p s**p))``."""
    s_sigma, m, sigma = (np.asarray(v, dtype=float) for v in (s_sigma, m, sigma))
    return s_sigma**p, (m + lam * sigma) ** p, c_p(p) * (m**p + lam**p * sigma**p)


def check_drift_chain(path: WalkPath, M: SupremumSample, sigma: int, p: float, lam: float | None = None) -> BoundReport:
    """Check both links of the drift chain at step ``sigma`` of ``path``.

    ``M`` must be the supremum of this very path: same ``lam`` (when ``lam`` is
    given) and the same truncation length.
    """
    if lam is not None and lam != M.lam:
        raise ValueError(f"lambda mismatch: check asked for {lam}, supremum was computed with {M.lam}")
    if M.truncated_at != path.K:
        raise ValueError("supremum was not computed on this path (truncation lengths differ)")
    if not 0 <= sigma <= path.K:
        raise ValueError(f"sigma={sigma} outside 0..{path.K}")
    s_sigma = float(path.partial_sums[sigma - 1]) if sigma else 0.0
    lhs, mid, rhs = (float(v) for v in chain_terms(s_sigma, M.value, sigma, M.lam, p))
    violated = bool(_below(lhs, mid) or _below(mid, rhs))
    return BoundReport(
        BoundName.DRIFT_CHAIN,
        lhs,
        rhs,
        rhs - lhs,
        {"p": float(p), "lambda": float(M.lam), "sigma": int(sigma), "middle": mid},
        violated,
        float(_rounding(lhs, rhs)),
    )


def coupled_sample(
    n: int, lam: float, rng: RngStream, normalization: Normalization = Normalization.LAST_SN
) -> tuple[OrderStatSample, SupremumSample, WalkPath]:
    """Build ``Y`` and ``M_lam`` from one shared Exp(1) increment stream.

    Both outputs carry the same coupling token, which
    :func:`check_decomposition` requires.
    """
    if not lam > 1:
        raise ValueError("lambda must exceed the increment mean 1")
    need = n if Normalization(normalization) is Normalization.LAST_SN else n + 1
    path, sup = walk.walk_with_supremum(EXP1, lam, rng, min_steps=need)
    token = ("coupled", rng.seed, rng.stream_id, n, float(lam))
    os = OrderStatSample.from_increments(path.increments, n, normalization, coupling=token)
    return os, replace(sup, coupling=token), path


def decomposition_terms(s_k, s_n, m, k, n: int, lam: float, p: float, eps: float):
    """Vectorized pieces of the decomposition.

    Returns ``(lhs, rhs, intermediate, on_A)`` where ``intermediate`` is
    ``(1+eps)**p S_k**p``, the bound on ``lhs`` off ``A_n``.
    """
    s_k, s_n, m, k = (np.asarray(v, dtype=float) for v in (s_k, s_n, m, k))
    on_a = n / s_n > 1.0 + eps
    lhs = (n * s_k / s_n) ** p
    rhs = n**p * on_a + c_p(p) * (1.0 + eps) ** p * (m**p + lam**p * k**p)
    return lhs, rhs, (1.0 + eps) ** p * s_k**p, on_a


def check_decomposition(os: OrderStatSample, M: SupremumSample, k: int, p: float, eps: float, lam: float) -> BoundReport:
    """Check the decomposition for one coupled sample at index ``k``.

    Rejects inputs that were not built together by :func:`coupled_sample`.
    """
    if os.coupling is None or os.coupling != M.coupling:
        raise ValueError("order statistics and supremum must come from the same increment stream")
    if lam != M.lam:
        raise ValueError(f"lambda mismatch: check asked for {lam}, supremum was computed with {M.lam}")
    if not lam > 1:
        raise ValueError("lambda must exceed the increment mean 1")
    if not 1 <= k <= os.n:
        raise ValueError(f"k={k} outside 1..{os.n}")
    if M.truncated_at < os.n:
        raise ValueError("supremum must cover at least n steps")
    event = event_An(os, eps)
    lhs, rhs, inter, on_a = (float(v) for v in decomposition_terms(os.sums[k - 1], os.S_n, M.value, k, os.n, lam, p, eps))
    chain_rhs = float(c_p(p) * (M.value**p + lam**p * k**p))
    violated = bool(_below(lhs, rhs))
    if not event.occurred:
        violated |= bool(_below(lhs, inter)) or bool(_below(float(os.sums[k - 1]) ** p, chain_rhs))
    return BoundReport(
        BoundName.DECOMPOSITION,
        lhs,
        rhs,
        rhs - lhs,
        {"p": float(p), "lambda": float(lam), "eps": float(eps), "n": os.n, "k": int(k), "A_n": event.occurred},
        violated,
        float(_rounding(lhs, rhs)),
    )


def power_mean_violations(a, b, p) -> int:
    """Count triples where ``(a+b)**p > c_p (a**p + b**p)`` beyond rounding."""
    a, b, p = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, p)))
    cp = np.maximum(2.0 ** (p - 1.0), 1.0)
    return int(_below((a + b) ** p, cp * (a**p + b**p)).sum())


@dataclass
class SweepCell:
    """Running tally for one parameter cell of a pathwise sweep."""

    suite: str
    p: float
    lam: float
    eps: float | None = None
    n: int = 0
    samples: int = 0
    checks: int = 0
    violations: int = 0
    min_slack: float = math.inf
    min_rel_slack: float = math.inf
    lhs_sum: float = 0.0
    rhs_sum: float = 0.0

    @property
    def key(self):
        return (self.suite, self.p, self.lam, self.eps, self.n)

    def add(self, lhs, rhs, bad, samples: int) -> None:
        slack = rhs - lhs
        scale = np.maximum(np.maximum(np.abs(lhs), np.abs(rhs)), np.finfo(float).tiny)
        self.samples += samples
        self.checks += int(lhs.size)
        self.violations += int(bad.sum())
        self.min_slack = min(self.min_slack, float(slack.min()))
        self.min_rel_slack = min(self.min_rel_slack, float((slack / scale).min()))
        self.lhs_sum += float(lhs.sum())
        self.rhs_sum += float(rhs.sum())

    def merge(self, other: "SweepCell") -> "SweepCell":
        self.samples += other.samples
        self.checks += other.checks
        self.violations += other.violations
        self.min_slack = min(self.min_slack, other.min_slack)
        self.min_rel_slack = min(self.min_rel_slack, other.min_rel_slack)
        self.lhs_sum += other.lhs_sum
        self.rhs_sum += other.rhs_sum
        return self

    def params(self) -> dict:
        out = {"p": self.p, "lambda": self.lam}
        if self.suite == "decomposition":
            out.update(eps=self.eps, n=self.n)
        return out

    def aggregate_report(self) -> BoundReport:
        """Averaged form of the cell: mean lhs against mean rhs over all checks."""
        lhs, rhs = self.lhs_sum / self.checks, self.rhs_sum / self.checks
        name = BoundName.DRIFT_CHAIN if self.suite == "chain" else BoundName.AGGREGATE_DECOMPOSITION
        return BoundReport(name, lhs, rhs, rhs - lhs, self.params(), bool(_below(lhs, rhs)), float(_rounding(lhs, rhs)))


def _decomposition_indices(n: int, rows: int, gen) -> np.ndarray:
    fixed = np.array([1, 2, max(1, math.isqrt(n)), max(1, n // 2), n])
    return np.column_stack([np.broadcast_to(np.minimum(fixed, n), (rows, 5)), gen.integers(1, n + 1, rows)])


def _sweep_rows(rows, rng, ps, lams, epss, ns):
    """Simulate ``rows`` coupled paths and tally every cell."""
    gen = rng.generator
    n_max = max(ns)
    # the certificate cannot fire before n_max steps, so the prefix needs only reductions
    sums = np.cumsum(gen.standard_exponential((rows, n_max)), axis=1)
    steps = np.arange(1, n_max + 1, dtype=float)
    states, actives, margins, burns = [], [], [], []
    for lam in lams:
        margins.append(walk.default_margin(EXP1, lam))
        burns.append(max(walk.burn_in(EXP1, lam, margins[-1]), n_max))
        st = walk._State(rows)
        drifted = sums - lam * steps
        best = drifted.argmax(axis=1)
        peak = drifted[np.arange(rows), best]
        st.cur[:] = drifted[:, -1]
        st.mx[:] = np.maximum(peak, 0.0)
        st.arg[:] = np.where(peak > 0, best + 1.0, 0.0)
        st.k[:] = n_max
        states.append(st)
        done = (st.mx - st.cur >= margins[-1]) & (st.k >= burns[-1])
        actives.append(np.flatnonzero(~done))
    while any(a.size for a in actives):
        x = gen.standard_exponential((rows, walk.BLOCK))
        for i, lam in enumerate(lams):
            if actives[i].size:
                actives[i] = walk._advance(states[i], actives[i], x[actives[i]], lam, margins[i], burns[i], math.inf)
    r = np.arange(rows)[:, None]
    sigma = np.column_stack([np.ones(rows, dtype=int), gen.integers(1, n_max + 1, rows), np.full(rows, n_max)])
    k_by_n = {n: _decomposition_indices(n, rows, gen) for n in ns}

    cells = {}
    for i, lam in enumerate(lams):
        st = states[i]
        m = st.mx[:, None]
        arg = st.arg.astype(int)
        # the argmax step is where the first link is tight
        sig = np.column_stack([sigma, np.clip(arg, 1, n_max)])
        s_sig = sums[r, sig - 1]
        for p in ps:
            lhs, mid, rhs = chain_terms(s_sig, m, sig, lam, p)
            cell = SweepCell("chain", p, lam)
            cell.add(lhs, rhs, _below(lhs, mid) | _below(mid, rhs), rows)
            cells[cell.key] = cell
            for n in ns:
                k = k_by_n[n]
                s_k, s_n = sums[r, k - 1], sums[:, n - 1 : n]
                chain_rhs = c_p(p) * (m**p + lam**p * k**p)
                for eps in epss:
                    lhs, rhs, inter, on_a = decomposition_terms(s_k, s_n, m, k, n, lam, p, eps)
                    bad = _below(lhs, rhs) | (~on_a & (_below(lhs, inter) | _below(s_k**p, chain_rhs)))
                    cell = SweepCell("decomposition", p, lam, eps, n)
                    cell.add(lhs, rhs, bad, rows)
                    cells[cell.key] = cell
    return cells


def _sweep_chunk(size, rng, ps, lams, epss, ns):
    total = {}
    for j, start in enumerate(range(0, size, walk.ROWS)):
        part = _sweep_rows(min(walk.ROWS, size - start), rng.substream(j), ps, lams, epss, ns)
        for key, cell in part.items():
            if key in total:
                total[key].merge(cell)
            else:
                total[key] = cell
    return total


def pathwise_sweep(
    trials: int,
    rng: RngStream,
    ps: Sequence[float] = (0.5, 1.0, 2.0, 3.0),
    lams: Sequence[float] = (1.5, 2.0, 3.0),
    epss: Sequence[float] = (0.05, 0.1),
    ns: Sequence[int] = (10, 100, 1000),
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
) -> list[SweepCell]:
    """Coupled sweep of the drift chain and the decomposition over a parameter grid.

    Each sample is one Exp(1) path that runs until every ``lam`` in ``lams``
    has certified its supremum and at least ``max(ns)`` steps are done.  The
    same sample serves every cell, so each cell sees ``trials`` coupled
    samples.  Chain checks use ``sigma`` in ``{1, random, max(ns), argmax}``;
    decomposition checks use ``k`` in ``{1, 2, isqrt(n), n//2, n, random}``.
    """
    if any(lam <= 1 for lam in lams):
        raise ValueError("every lambda must exceed the increment mean 1")
    if any(n < 1 for n in ns):
        raise ValueError("n must be at least 1")
    func = partial(_sweep_chunk, ps=tuple(ps), lams=tuple(lams), epss=tuple(epss), ns=tuple(ns))
    total: dict = {}
    for part in map_chunks(func, trials, rng, workers=workers, chunk_size=chunk_size):
        for key, cell in part.items():
            if key in total:
                total[key].merge(cell)
            else:
                total[key] = cell
    return list(total.values())


@dataclass
class LimsupDemo:
    reports: list[BoundReport]
    rank_moments: dict = field(default_factory=dict)
    value_moments: dict = field(default_factory=dict)
    sup_moments: dict = field(default_factory=dict)


def demonstrate_limsup_bound(
    rule,
    p: float,
    n_grid: Sequence[int],
    trials: int,
    rng: RngStream,
    lams: Sequence[float] = (1.5, 2.0, 3.0),
    sup_samples: int = 1_000_000,
    workers: int = 1,
    max_relative_se: float = 0.25,
) -> LimsupDemo:
    """Compare ``n**p E[X**p]`` with ``c_p lam**p E[R**p] + c_p E[M_lam**p]`` at each ``n`` and ``lam``.

    ``M_lam`` is built from Exp(1) increments.  A comparison is violated when
    ``lhs - rhs`` exceeds 4 combined standard errors.  It is undecided instead
    when the rank moment is non-finite or its relative standard error exceeds
    ``max_relative_se``, because an exploding rank moment says nothing about
    the bound.
    """
    cp = c_p(p)
    sup = {lam: walk.estimate_moment_M(EXP1, lam, p, sup_samples, rng.substream(1000 + j), workers=workers) for j, lam in enumerate(lams)}
    demo = LimsupDemo([], sup_moments=sup)
    for i, n in enumerate(n_grid):
        ev = evaluate_rule(rule, n, p, trials, rng.substream(i), workers=workers)
        demo.rank_moments[n], demo.value_moments[n] = ev.rank_moment, ev.scaled_value_moment
        r, x = ev.rank_moment, ev.scaled_value_moment
        unstable = not math.isfinite(r.mean) or r.mean <= 0 or r.std_error > max_relative_se * r.mean
        for lam in lams:
            m = sup[lam]
            rhs = cp * lam**p * r.mean + cp * m.mean
            se = math.sqrt(x.std_error**2 + (cp * lam**p * r.std_error) ** 2 + (cp * m.std_error) ** 2)
            tol = SE_MULTIPLIER * se
            slack = rhs - x.mean
            demo.reports.append(
                BoundReport(
                    BoundName.LIMSUP,
                    x.mean,
                    rhs,
                    slack,
                    {"p": float(p), "lambda": float(lam), "n": int(n)},
                    violated=(not unstable) and slack < -tol,
                    tolerance=tol,
                    undecided=unstable,
                )
            )
    return demo
