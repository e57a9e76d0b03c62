import random
from fractions import Fraction

import pytest
from hypothesis import assume, given, strategies as st

from finer.dataset import SynthConfig, make_dataset, synth_generate
from finer.metrics import EarlyStopper, MetricError, acc, auc, conflict_analysis, conflict_triples, early_stop, gain

from conftest import datasets, random_dataset


def pairwise_auc(pairs):
    pos = [s for s, r in pairs if r == 1]
    neg = [s for s, r in pairs if r == 0]
    wins = sum(2 if p > n else 1 if p == n else 0 for p in pos for n in neg)
    return float(Fraction(wins, 2 * len(pos) * len(neg)))


def test_auc_simple_cases():
    assert auc([(0.9, 1), (0.8, 1), (0.2, 0)]) == 1.0
    assert auc([(0.1, 1), (0.8, 0)]) == 0.0
    assert auc([(0.5, 1), (0.5, 0), (0.5, 1)]) == 0.5
    with pytest.raises(MetricError):
        auc([(0.3, 1), (0.4, 1)])
    with pytest.raises(MetricError):
        auc([])


def test_auc_matches_pairwise_count():
    rng = random.Random(0)
    for _ in range(100):
        n = rng.randint(2, 60)
        pairs = [(rng.choice([0.1, 0.2, 0.5, 0.7]) if rng.random() < 0.5 else rng.random(), rng.randint(0, 1))
                 for _ in range(n)]
        if len({r for _, r in pairs}) < 2:
            continue
        assert auc(pairs) == pairwise_auc(pairs)


# integer scores keep the map exact in floating point, so it stays strictly increasing
@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_invariant_under_monotone_maps(pairs):
    assume(len({r for _, r in pairs}) == 2)
    mapped = [(3.0 * s ** 3 + s - 2.0, r) for s, r in pairs]
    assert auc(mapped) == auc(pairs)


def test_acc_and_threshold_tie():
    assert acc([(0.9, 1), (0.1, 0)]) == 1.0
    assert acc([(0.5, 0)]) == 0.0
    assert acc([(0.5, 1)]) == 1.0
    rng = random.Random(1)
    pairs = [(rng.random(), rng.randint(0, 1)) for _ in range(200)]
    manual = sum((s >= 0.5) == bool(r) for s, r in pairs) / 200
    assert acc(pairs) == manual


@pytest.mark.parametrize("new, base, expected", [(0.8323, 0.7882, 20.82), (0.9520, 0.6832, 84.85)])
def test_gain_values(new, base, expected):
    assert abs(gain(new, base) - expected) <= 0.01


def test_gain_edge_cases():
    assert gain(0.7, 0.7) == 0.0
    with pytest.raises(MetricError):
        gain(1.0, 1.0)


@given(st.floats(0.01, 0.99), st.floats(0.0, 0.98), st.floats(0.0, 0.98))
def test_gain_antitone_in_base(s, b1, b2):
    lo, hi = sorted((b1, b2))
    assume(s > hi)
    assert gain(s, hi) <= gain(s, lo) + 1e-9


def test_early_stop_cases():
    assert early_stop([0.5, 0.5, 0.5, 0.5, 0.5, 0.5], 3).stop_epoch == 3  # after the 4th epoch
    assert early_stop([0.5, 0.5, 0.5, 0.5], 3).best_epoch == 0
    assert early_stop([0.1 * k for k in range(20)], 3).stop_epoch is None
    assert early_stop([3.0, 2.0, 1.0, 1.5, 1.2, 1.1], 3, mode="min") == early_stop([-3, -2, -1, -1.5, -1.2, -1.1], 3)
    with pytest.raises(ValueError):
        EarlyStopper(0)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(1, 5))
def test_early_stop_keeps_best_seen(history, patience):
    d = early_stop(history, patience)
    seen = history if d.stop_epoch is None else history[:d.stop_epoch + 1]
    assert d.best_epoch == seen.index(max(seen))
    if d.stop_epoch is not None:
        assert d.stop_epoch - d.best_epoch == patience


def _scan_conflicts(ds):
    found = []
    for seq in ds.sequences:
        for k, (q, r) in enumerate(seq.cells):
            earlier = [c.response for c in seq.cells[:k] if c.question == q]
            if earlier[-2:] == [1, 1]:
                found.append((seq.student, k, q, r))
    return found


def test_conflict_small_cases():
    ds = make_dataset([[(0, 1), (0, 1), (0, 0)], [(0, 1), (1, 1), (2, 0)]], question_count=3)
    inst = conflict_triples(ds)
    assert [(i.student, i.position, i.response) for i in inst] == [("s0", 2, 0)]
    stats = conflict_analysis(ds)
    assert (stats.n_triples, stats.n_110, stats.n_111) == (1, 1, 0)
    assert stats.p_110 == 1.0 and stats.p_110_of_all == 1 / 6


def test_non_adjacent_versus_adjacent():
    ds = make_dataset([[(0, 1), (1, 0), (0, 1), (0, 1)]], question_count=2)
    assert [i.position for i in conflict_triples(ds)] == [3]
    assert conflict_triples(ds, adjacent=True) == []
    ds = make_dataset([[(0, 1), (0, 1), (0, 1)]], question_count=1)
    assert len(conflict_triples(ds, adjacent=True)) == 1


@given(datasets(max_len=20))
def test_conflicts_match_rescan(ds):
    got = [(i.student, i.position, i.question, i.response) for i in conflict_triples(ds)]
    assert got == _scan_conflicts(ds)


def test_conflict_scoring():
    ds = make_dataset([[(0, 1), (0, 1), (0, 0), (1, 1), (1, 1), (1, 1)]], question_count=2)
    preds = {("s0", 2): 0.2, ("s0", 5): 0.4}
    stats = conflict_analysis(ds, preds)
    assert stats.acc_110 == 1.0 and stats.acc_111 == 0.0
    assert stats.n_scored_110 == 1 and stats.n_scored_111 == 1
    assert conflict_analysis(ds, {}).acc_110 is None


def test_generator_scenario_two_mostly_fails():
    stats = conflict_analysis(synth_generate(SynthConfig(students=2000, scenario2_fraction=1.0, seed=3)))
    assert abs(stats.p_110 - 0.95) <= 0.02
