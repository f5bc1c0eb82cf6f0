import math
import pickle

import numpy as np
import pytest
from scipy import stats

from ranklab import poisson
from ranklab.dist import RngStream
from ranklab.poisson import PoissonRule


def test_atom_count_is_poisson(rng):
    s, _ = poisson.sample_atoms_batch(20.0, 100_000, rng)
    counts = np.isfinite(s).sum(axis=1)
    se = counts.std() / math.sqrt(counts.size)
    assert abs(counts.mean() - 20.0) < 4 * se
    assert abs(counts.var() - 20.0) < 0.05 * 20


def test_ranks_hold_by_construction(rng):
    for i in range(50):
        atoms = poisson.sample_atoms(15.0, rng.substream(i))
        by_s = np.argsort(atoms.s)
        assert np.array_equal(np.sort(atoms.k), np.arange(1, len(atoms) + 1))
        assert np.array_equal(atoms.k[by_s], np.arange(1, len(atoms) + 1))
        assert np.all(np.diff(atoms.t) >= 0) and np.all(atoms.s <= 15.0)


def test_atoms_uniform_on_the_rectangle(rng):
    s, t = poisson.sample_atoms_batch(10.0, 20_000, rng)
    keep = np.isfinite(s)
    counts, _, _ = np.histogram2d(t[keep], s[keep], bins=10, range=[[0, 1], [0, 10]])
    chi2 = stats.chisquare(counts.ravel())
    assert chi2.pvalue > 1e-3


def test_empty_box_probability(rng):
    ep = poisson.simulate_poisson_episodes(PoissonRule.constant(3.0), 10.0, 400_000, rng)
    target = math.exp(-3.0)
    se = math.sqrt(target * (1 - target) / ep.no_stop.size)
    assert abs(ep.no_stop.mean() - target) < 4 * se


def test_zero_boundary_never_stops(rng):
    est = poisson.run_poisson_rule(PoissonRule.zero(), 5.0, 1.0, 10_000, rng)
    assert est.notes["no_stop_frequency"] == 1.0
    assert est.mean == pytest.approx(6.0, abs=4 * est.std_error + 1e-9)


def test_boundary_above_cap_is_rejected(rng):
    with pytest.raises(ValueError, match="exceeds"):
        poisson.simulate_poisson_episodes(PoissonRule.constant(6.0), 5.0, 10, rng)
    with pytest.raises(ValueError):
        poisson.run_poisson_rule(PoissonRule.constant(6.0), 5.0, 1.0, 10, rng)
    with pytest.raises(ValueError):
        PoissonRule.parse("wiggle:1", 5.0)


def test_stopped_atom_lies_under_the_boundary(rng):
    rule = PoissonRule.reciprocal(1.0, 20.0)
    ep = poisson.simulate_poisson_episodes(rule, 20.0, 20_000, rng)
    ok = ~ep.no_stop
    assert np.all(ep.stopped_s[ok] <= rule.boundary(ep.stopped_t[ok]))
    assert np.all(ep.rank[ok] >= 1) and np.all(ep.rank[ep.no_stop] == ep.atom_count[ep.no_stop] + 1)


def test_larger_cap_does_not_change_stopped_atoms():
    rule = PoissonRule.constant(2.0)
    a = poisson.simulate_poisson_episodes(rule, 4.0, 50_000, RngStream(3, 0))
    b = poisson.simulate_poisson_episodes(rule, 12.0, 50_000, RngStream(4, 0))
    for x, y in ((a.rank, b.rank), (a.stopped_t, b.stopped_t)):
        x, y = x[~a.no_stop], y[~b.no_stop]
        assert stats.ks_2samp(x, y).pvalue > 1e-3
    assert abs(a.no_stop.mean() - b.no_stop.mean()) < 0.01


def test_scalar_scan_matches_batch(rng):
    rule = PoissonRule.reciprocal(1.5, 15.0)
    scalar = []
    for i in range(3000):
        hit = rule.run_on_atoms(poisson.sample_atoms(15.0, rng.substream(i)))
        scalar.append(np.nan if hit is None else hit[0])
    scalar = np.array(scalar)
    batch = poisson.simulate_poisson_episodes(rule, 15.0, 20_000, rng.substream(10**6))
    assert abs(np.isnan(scalar).mean() - batch.no_stop.mean()) < 0.02
    assert stats.ks_2samp(scalar[~np.isnan(scalar)], batch.rank[~batch.no_stop]).pvalue > 1e-3


def test_reciprocal_rule_stable_across_seeds():
    rule = PoissonRule.parse("recip:1", 30.0)
    ests = [poisson.run_poisson_rule(rule, 30.0, 1.0, 100_000, RngStream(seed, 0)) for seed in (1, 2, 3)]
    for a in ests:
        for b in ests:
            assert abs(a.mean - b.mean) < 4 * math.hypot(a.std_error, b.std_error)
    # mass under min(1/(1-t), 30) is 1 + ln 30, so no-stop is about e^-(1 + ln 30) = 0.0123
    target = math.exp(-(1 + math.log(30.0)))
    assert all(abs(e.notes["no_stop_frequency"] - target) < 4 * e.notes["no_stop_se"] for e in ests)


def test_tuning_is_a_grid_minimum(rng):
    best, results = poisson.tune_reciprocal([0.5, 1.0, 2.0], 20.0, 1.0, 20_000, rng)
    assert best == min(results, key=lambda r: r[1].mean)[0]


def test_worker_count_does_not_change_results():
    rule = PoissonRule.reciprocal(1.0, 20.0)
    a = poisson.run_poisson_rule(rule, 20.0, 1.0, 30_000, RngStream(8, 0), workers=1, chunk_size=10_000)
    b = poisson.run_poisson_rule(rule, 20.0, 1.0, 30_000, RngStream(8, 0), workers=2, chunk_size=10_000)
    assert a == b
    assert pickle.loads(pickle.dumps(rule)).name == "recip:1"


@pytest.mark.parametrize("k", [1, 3, 5])
def test_scaled_uniform_minima_approach_gamma(rng, k):
    x = poisson.bottom_scaled_uniforms(10_000, 5, 4000, rng)
    assert stats.kstest(x[:, k - 1], stats.gamma(k).cdf).pvalue > 1e-3
