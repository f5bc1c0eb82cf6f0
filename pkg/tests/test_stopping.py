import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ranklab import stopping
from ranklab.dist import RngStream
from ranklab.stopping import Episode, FixedIndex, MemorylessThreshold, OracleRule


def within(est, target, k=4.0):
    return abs(est.mean - target) <= k * est.std_error


def hand_relative_rank_value(n):
    """Exact rational backward induction, written independently of the package."""
    value = Fraction(n + 1, 2)
    for j in range(n - 1, 0, -1):
        stops = [Fraction(r * (n + 1), j + 1) for r in range(1, j + 1)]
        value = sum(min(s, value) for s in stops) / j
    return value


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=40))
def test_ranks_are_a_permutation(values):
    ranks = Episode(np.array(values)).ranks
    assert sorted(ranks) == list(range(1, len(values) + 1))
    for i, x in enumerate(values):
        assert ranks[i] == stopping.rank_in(np.array(values), i)


def test_tie_break_by_index():
    assert list(Episode(np.array([0.5, 0.5, 0.1])).ranks) == [2, 3, 1]


def test_fixed_first_index_episode(rng):
    out = stopping.run_episode(FixedIndex(1), 5, rng)
    assert out.tau == 1 and 1 <= out.rank <= 5


def test_fixed_first_index_moments(rng):
    ev = stopping.evaluate_rule(FixedIndex(1), 5, 1.0, 10**6, rng)
    assert within(ev.rank_moment, 3.0) and within(ev.scaled_value_moment, 2.5)
    ev = stopping.evaluate_rule(FixedIndex(1), 100, 1.0, 10**6, rng)
    assert within(ev.rank_moment, 50.5) and within(ev.scaled_value_moment, 50.0)


def test_zero_threshold_forces_last_step(rng):
    rule = MemorylessThreshold(lambda j, n: np.zeros(np.shape(j)), "zero")
    tau, x, rank = stopping.simulate_direct(rule, 5, 200_000, rng)
    assert np.all(tau == 5)
    assert abs(rank.mean() - 3.0) < 4 * rank.std() / math.sqrt(rank.size)
    assert abs(x.mean() - 0.5) < 4 * x.std() / math.sqrt(x.size)
    ev = stopping.evaluate_rule(MemorylessThreshold.family((0, 1, 0)), 50, 1.0, 10**5, rng)
    assert within(ev.rank_moment, 25.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(1, 11), st.integers(0, 2**32))
def test_decisions_depend_only_on_the_prefix(n, j, seed):
    j = min(j, n)
    gen = np.random.default_rng(seed)
    a = gen.random(n)
    b = a.copy()
    b[j:] = gen.random(n - j)
    rules = [
        FixedIndex(3),
        MemorylessThreshold.family((1.9, 1.0, 0.5)),
        stopping.dp_relative_rank(n)[0],
    ]
    if n <= 3:
        rules.append(stopping.dp_full_info(n, 1000).rule)
    for rule in rules:
        for i in range(1, j + 1):
            assert rule.decide(a[:i], n) == rule.decide(b[:i], n)


@pytest.mark.parametrize(
    "rule, n",
    [
        (MemorylessThreshold.family((1.9, 1.0, 0.5)), 20),
        (MemorylessThreshold.family((2.0, 1.0, 0.0)), 7),
        (MemorylessThreshold.constant_over_n(2.0), 15),
        (stopping.dp_relative_rank(12)[0], 12),
        (FixedIndex(4), 9),
    ],
)
def test_exact_samplers_agree_with_literal_simulation(rule, n):
    for p in (1.0, 2.0):
        lazy = stopping.evaluate_rule(rule, n, p, 400_000, RngStream(1, 0))
        direct = stopping.evaluate_rule(rule, n, p, 400_000, RngStream(2, 0), method="direct")
        for a, b in ((lazy.rank_moment, direct.rank_moment), (lazy.scaled_value_moment, direct.scaled_value_moment)):
            assert abs(a.mean - b.mean) < 4 * math.hypot(a.std_error, b.std_error)


def test_lazy_memoryless_joint_law(rng):
    rule = MemorylessThreshold.family((1.9, 1.0, 0.5))
    tau_a, _, rank_a = rule.sample_outcomes(10, 300_000, rng.substream(0))
    tau_b, _, rank_b = stopping.simulate_direct(rule, 10, 300_000, rng.substream(1))
    for t in (1, 5, 10):
        pa, pb = (tau_a == t).mean(), (tau_b == t).mean()
        assert abs(pa - pb) < 5 * math.sqrt(pa * (1 - pa) * 2 / tau_a.size) + 1e-9
    for r in (1, 2, 3):
        pa, pb = (rank_a == r).mean(), (rank_b == r).mean()
        assert abs(pa - pb) < 5 * math.sqrt(pa * (1 - pa) * 2 / rank_a.size) + 1e-9


def test_decreasing_thresholds_fall_back_to_literal_simulation(rng):
    rule = MemorylessThreshold(lambda j, n: np.where(np.asarray(j) < 3, 0.5, 0.1), "down")
    tau, _, rank = rule.sample_outcomes(6, 1000, rng)
    assert tau.min() >= 1 and rank.max() <= 6


@given(st.integers(1, 200))
@settings(deadline=None)
def test_relative_rank_value_matches_hand_recursion(n):
    assert stopping.dp_relative_rank(n)[1] == pytest.approx(float(hand_relative_rank_value(n)), rel=1e-12)


def test_relative_rank_small_values():
    assert stopping.dp_relative_rank(1)[1] == 1.0
    assert stopping.dp_relative_rank(2)[1] == 1.5
    assert stopping.dp_relative_rank(3)[1] == pytest.approx(5 / 3)
    # the limit 3.8695... is approached slowly from below
    assert 3.8 < stopping.dp_relative_rank(1000)[1] < 3.8695


def test_relative_rank_value_monotone_and_bounded():
    values = np.array([stopping.dp_relative_rank(n)[1] for n in range(1, 1001)])
    assert np.all(np.diff(values) >= -1e-12)
    assert np.all(values <= (np.arange(1, 1001) + 1) / 2)


@pytest.mark.parametrize("n", [2, 10, 1000])
def test_relative_rank_rule_simulation_matches_value(rng, n):
    rule, value = stopping.dp_relative_rank(n)
    ev = stopping.evaluate_rule(rule, n, 1.0, 10**6, rng)
    assert within(ev.rank_moment, value)


def test_full_info_small_n():
    assert stopping.dp_full_info(1).value == 1.0
    sol = stopping.dp_full_info(2, 10_000)
    assert sol.value == pytest.approx(1.25, abs=1e-6)
    assert sol.thresholds[0] == pytest.approx(0.5, abs=1e-4)


def test_full_info_three_converges_and_beats_rank_rule(rng):
    coarse, fine = stopping.dp_full_info(3, 2_000), stopping.dp_full_info(3, 4_000)
    assert abs(coarse.value - fine.value) < 1e-3
    # independent adaptive quadrature of the same recursion gives 1.391552...
    assert fine.value == pytest.approx(1.391552085, abs=2e-4)
    assert fine.value <= stopping.dp_relative_rank(3)[1] + 1e-3
    ev = stopping.evaluate_rule(fine.rule, 3, 1.0, 400_000, rng)
    assert within(ev.rank_moment, fine.value)


def test_full_info_rejects_large_n():
    with pytest.raises(ValueError, match="rule families"):
        stopping.dp_full_info(4)
    with pytest.raises(ValueError):
        stopping.dp_full_info(2, 100)


def test_oracle_rule_is_non_adapted_but_evaluable(rng):
    rule = OracleRule(0.5)
    ev = stopping.evaluate_rule(rule, 100, 1.0, 200_000, rng)
    # rank is 1 w.p. 1/2, else uniform on 1..n
    assert within(ev.rank_moment, 0.5 + 0.5 * 50.5)
    out = stopping.run_episode(rule, 20, rng)
    assert 1 <= out.rank <= 20


def test_evaluate_rule_needs_enough_trials(rng):
    with pytest.raises(ValueError):
        stopping.evaluate_rule(FixedIndex(1), 5, 1.0, 999, rng)


def test_tuned_family_stays_bounded_while_c_over_n_does_not(rng):
    family = MemorylessThreshold.family((1.9, 1.0, 0.5))
    flat = MemorylessThreshold.constant_over_n(2.0)
    ns = [100, 1000, 10_000]
    fam = [stopping.evaluate_rule(family, n, 1.0, 200_000, rng.substream(i)).rank_moment.mean for i, n in enumerate(ns)]
    assert max(fam) / min(fam) < 2
    # a flat c/n threshold misses every item w.p. about e^-c and pays ~n/2 for it
    flat_ranks = [stopping.evaluate_rule(flat, n, 1.0, 200_000, rng.substream(10 + i)).rank_moment.mean for i, n in enumerate(ns)]
    assert flat_ranks[2] / flat_ranks[0] > 50


def test_rules_pickle_for_worker_processes():
    import pickle

    for rule in (MemorylessThreshold.family((1, 1, 0)), MemorylessThreshold.constant_over_n(2), stopping.dp_relative_rank(5)[0], OracleRule(0.2)):
        assert pickle.loads(pickle.dumps(rule)).rule_id == rule.rule_id


def test_evaluation_independent_of_workers():
    rule = MemorylessThreshold.family((2.0, 1.0, 0.0))
    a = stopping.evaluate_rule(rule, 1000, 1.0, 30_000, RngStream(4, 0), workers=1, chunk_size=10_000)
    b = stopping.evaluate_rule(rule, 1000, 1.0, 30_000, RngStream(4, 0), workers=3, chunk_size=10_000)
    assert a == b


def test_pattern_search_improves_and_is_reproducible():
    kwargs = dict(theta0=(1.0, 1.0, 0.0), trials=20_000, validation_trials=20_000)
    res = stopping.optimize_memoryless(200, 1.0, 12, RngStream(9, 0), **kwargs)
    assert res.objective <= res.trace[0][1]
    assert res.evaluations <= 12
    again = stopping.optimize_memoryless(200, 1.0, 12, RngStream(9, 0), **kwargs)
    assert again.theta == res.theta and again.evaluation == res.evaluation


def test_pattern_search_respects_fixed_axes():
    res = stopping.optimize_memoryless(100, 1.0, 8, RngStream(1, 0), theta0=(0.0, 1.0, 0.0), trials=5_000, fixed=(0, 2))
    assert res.theta[0] == 0.0 and res.theta[2] == 0.0
    assert abs(res.evaluation.rank_moment.mean - 50.5) < 4 * res.evaluation.rank_moment.std_error
