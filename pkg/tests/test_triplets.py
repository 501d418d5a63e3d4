import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlkd.triplets import TripletIndex, generate_triplets
from oracles import brute_force_triplets


class FixedDraws:
    """Stands in for a Generator and replays prepared index triples."""

    def __init__(self, draws):
        self.draws = [np.array(d) for d in draws]

    def choice(self, n, size, replace):
        assert size == 3 and replace is False
        return self.draws.pop(0)


H = [np.array([[0.0], [1.0], [3.0]])]


def test_swap_when_first_pick_is_farther():
    assert generate_triplets(H, FixedDraws([(0, 2, 1)]), n=1) == [TripletIndex(0, 1, 2)]


def test_no_swap_when_first_pick_is_closer():
    assert generate_triplets(H, FixedDraws([(0, 1, 2)]), n=1) == [TripletIndex(0, 1, 2)]


def test_split_vote_keeps_order():
    opposite = [np.array([[0.0], [1.0], [3.0]]), np.array([[0.0], [3.0], [1.0]])]
    assert generate_triplets(opposite, FixedDraws([(0, 1, 2)]), n=1) == [TripletIndex(0, 1, 2)]


def test_tie_counts_against_swap():
    tie = [np.array([[0.0], [1.0], [-1.0]])]
    assert generate_triplets(tie, FixedDraws([(0, 1, 2)]), n=1) == [TripletIndex(0, 1, 2)]


def test_majority_of_three():
    hs = [np.array([[0.0], [3.0], [1.0]])] * 2 + [np.array([[0.0], [1.0], [3.0]])]
    assert generate_triplets(hs, FixedDraws([(0, 1, 2)]), n=1) == [TripletIndex(0, 2, 1)]


def test_batch_too_small():
    with pytest.raises(ValueError):
        generate_triplets([np.zeros((2, 4))], np.random.default_rng(0))


def test_n_triplets_distinct_in_range():
    rng = np.random.default_rng(0)
    hs = [rng.normal(size=(8, 16)), rng.normal(size=(8, 32))]
    out = generate_triplets(hs, rng)
    assert len(out) == 8
    for t in out:
        assert len(set(t)) == 3 and all(0 <= i < 8 for i in t)


@given(st.integers(0, 10_000), st.integers(3, 10), st.integers(1, 3))
@settings(max_examples=100, deadline=None)
def test_matches_brute_force(seed, n, n_teachers):
    rng = np.random.default_rng(seed)
    hs = [rng.normal(size=(n, int(rng.choice([16, 32])))) for _ in range(n_teachers)]
    got = generate_triplets(hs, np.random.default_rng(seed + 1))
    want = brute_force_triplets(hs, np.random.default_rng(seed + 1))
    assert [tuple(t) for t in got] == want


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_monotone_distance_invariance(seed):
    rng = np.random.default_rng(seed)
    hs = [rng.normal(size=(8, 16)) for _ in range(3)]
    a = generate_triplets(hs, np.random.default_rng(seed), "squared_euclidean")
    b = generate_triplets(hs, np.random.default_rng(seed), "euclidean")
    assert a == b


def test_swap_involution():
    """Exactly one of the two orders is emitted, and negating every vote flips it back."""
    rng = np.random.default_rng(3)
    h = rng.normal(size=(6, 4))
    draws = [tuple(rng.choice(6, 3, replace=False)) for _ in range(20)]
    fwd = generate_triplets([h], FixedDraws(draws), n=20)
    for (a, p, q), d in zip(fwd, draws):
        assert a == d[0] and {p, q} == {d[1], d[2]}
        again = generate_triplets([h], FixedDraws([(a, p, q)]), n=1)[0]
        assert again == (a, p, q)
