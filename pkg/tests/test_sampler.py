import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy.stats import chisquare

from stochimg.rng import derive_key
from stochimg.sampler import AliasSampler, build_alias, sample_block

weights = st.lists(st.floats(0, 100), min_size=1, max_size=40)


def table_mass(prob, alias):
    """Probability mass the alias tables assign to each index."""
    n = prob.size
    mass = np.zeros(n)
    for col in range(n):
        mass[col] += prob[col] / n
        mass[alias[col]] += (1 - prob[col]) / n
    return mass


@given(weights)
def test_alias_tables_reproduce_the_distribution(w):
    assume(sum(w) > 0)
    p = np.array(w) / sum(w)
    prob, alias = build_alias(p)
    assert np.allclose(table_mass(prob, alias), p, atol=1e-12)
    assert np.all((prob >= 0) & (prob <= 1))


@given(weights)
def test_zero_probability_blocks_unreachable(w):
    assume(sum(w) > 0)
    p = np.array(w) / sum(w)
    prob, alias = build_alias(p)
    for col in range(p.size):
        if prob[col] > 0:
            assert p[col] > 0
        if prob[col] < 1:
            assert p[alias[col]] > 0


def test_build_alias_rejects_bad_input():
    with pytest.raises(ValueError):
        build_alias([])
    with pytest.raises(ValueError):
        build_alias([0, 0])
    with pytest.raises(ValueError):
        build_alias([0.5, -0.1])


def test_draw_and_draw_many_agree():
    p = np.array([0.1, 0.0, 0.6, 0.3])
    a = AliasSampler(p, key=99)
    b = AliasSampler(p, key=99)
    singles = [a.draw() for _ in range(500)]
    assert b.draw_many(500).tolist() == singles
    assert a.counter == b.counter == 500
    assert sample_block(a) == int(b.draw_many(1)[0])


def test_sampler_is_deterministic_per_key():
    p = np.ones(10) / 10
    assert AliasSampler(p, 1).draw_many(50).tolist() == AliasSampler(p, 1).draw_many(50).tolist()
    assert AliasSampler(p, 1).draw_many(50).tolist() != AliasSampler(p, 2).draw_many(50).tolist()


@pytest.mark.parametrize("p", [
    np.ones(16) / 16,
    np.array([0.5, 0.25, 0.125, 0.0625, 0.0625]),
    np.arange(1, 30, dtype=float) / np.arange(1, 30).sum(),
])
def test_chi_square_goodness_of_fit(p):
    draws = AliasSampler(p, derive_key("chi2", p.size)).draw_many(200_000)
    counts = np.bincount(draws, minlength=p.size)
    assert chisquare(counts, p * draws.size).pvalue > 1e-4


def test_zero_probability_never_drawn_in_practice():
    p = np.array([0.0, 0.7, 0.0, 0.3, 0.0])
    draws = AliasSampler(p, 5).draw_many(100_000)
    assert set(np.unique(draws).tolist()) == {1, 3}
