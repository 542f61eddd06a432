import numpy as np
import pytest

from udsgd_lab import graph, markov
from udsgd_lab.sampling import (KINDS, SamplerError, SamplerSpec, make_sampler, stationary_law,
                                weight, weights)


def spec_for(kind, g):
    return SamplerSpec(kind, graph=g if kind in ("srw", "nbrw", "srrw") else None)


def test_spec_validation():
    with pytest.raises(SamplerError):
        SamplerSpec("lazy")
    with pytest.raises(SamplerError):
        SamplerSpec("srw")
    with pytest.raises(SamplerError):
        SamplerSpec("srrw", graph.generate("ring", 3), alpha=-1)
    with pytest.raises(SamplerError):
        SamplerSpec("srrw", graph.generate("ring", 3), b=0.5)


def test_size_mismatch():
    with pytest.raises(SamplerError):
        make_sampler(SamplerSpec("srw", graph.generate("ring", 4)), 5, 0)


def test_shuffle_fixed_permutation():
    a = make_sampler(SamplerSpec("shuffle"), 4, 11)
    b = make_sampler(SamplerSpec("shuffle"), 4, 11)
    assert sorted(a.permutation.tolist()) == [0, 1, 2, 3]
    assert np.array_equal(a.permutation, b.permutation)
    s = make_sampler(SamplerSpec("shuffle"), 3, 5)
    first = [s.next() for _ in range(3)]
    assert sorted(first) == [0, 1, 2]
    assert [s.next() for _ in range(3)] == first


def test_shuffle_epoch_counts():
    s = make_sampler(SamplerSpec("shuffle"), 7, 2)
    x = s.draw(7 * 13)
    assert np.all(np.bincount(x.reshape(13, 7)[5], minlength=7) == 1)
    assert np.all(np.bincount(x) == 13)


def test_srrw_initial_measure():
    s = make_sampler(SamplerSpec("srrw", graph.generate("path", 3), alpha=20, b=0.8), 3, 0)
    assert np.allclose(s.x, 1 / 3)


def test_nbrw_starts_like_srw():
    s = make_sampler(SamplerSpec("nbrw", graph.generate("path", 3)), 3, 0)
    assert s.previous == -1


def test_srrw_alpha_zero_matches_baseline(triangle_tail):
    s = make_sampler(SamplerSpec("srrw", triangle_tail, alpha=0.0), 5, 3)
    s.draw(50)
    P = markov.srw_kernel(triangle_tail)
    for node in range(5):
        assert np.array_equal(s.transition_row(node), P[node])


def test_nbrw_forced_move_on_ring():
    g = graph.generate("ring", 4)
    for seed in range(20):
        s = make_sampler(SamplerSpec("nbrw", g), 4, seed)
        s.current, s.previous, s.started = 1, 0, True
        assert s.next() == 2


@pytest.mark.parametrize("kind", KINDS)
def test_draw_equals_repeated_next(kind, triangle_tail):
    spec = spec_for(kind, triangle_tail)
    a = make_sampler(spec, 5, 42)
    b = make_sampler(spec, 5, 42)
    chunks = np.concatenate([a.draw(1), a.draw(17), a.draw(300)])
    assert np.array_equal(chunks, [b.next() for _ in range(318)])


def test_nbrw_never_backtracks_at_degree_two_or_more():
    g = graph.generate("random_connected", 12, 0.25, seed=3)
    s = make_sampler(SamplerSpec("nbrw", g), 12, 0)
    x = s.draw(20000)
    deg = g.degrees
    for t in range(2, len(x)):
        if deg[x[t - 1]] >= 2:
            assert x[t] != x[t - 2]
        assert x[t] in g.neighbors[x[t - 1]]


def test_nbrw_backtracks_at_leaf():
    g = graph.generate("path", 4)
    x = make_sampler(SamplerSpec("nbrw", g), 4, 1).draw(200)
    # deterministic bounce between the two ends
    leaf_hits = np.flatnonzero((x[1:-1] == 0) | (x[1:-1] == 3)) + 1
    assert np.all(x[leaf_hits - 1] == x[leaf_hits + 1])


def test_srrw_measure_stays_on_simplex(triangle_tail):
    s = make_sampler(SamplerSpec("srrw", triangle_tail, alpha=20), 5, 8)
    for _ in range(200):
        s.draw(7)
        assert np.all(s.x > 0) and abs(s.x.sum() - 1) < 1e-12
    # after k moves, x = running convex combination; check one step by hand
    x0, step, cur = s.x.copy(), s.step, s.current
    nxt = s.next()
    beta = (step + 2) ** -0.8
    expect = (1 - beta) * x0
    expect[nxt] += beta
    assert np.allclose(s.x, expect, atol=1e-15)


@pytest.mark.parametrize("kind", KINDS)
def test_visit_frequencies_converge(kind):
    g = graph.generate("random_connected", 10, 0.4, seed=5)
    spec = spec_for(kind, g)
    x = make_sampler(spec, 10, 77).draw(100_000)
    freq = np.bincount(x, minlength=10) / len(x)
    tv = 0.5 * np.abs(freq - stationary_law(spec, 10)).sum()
    assert tv < 0.02


def test_weights_examples():
    path = graph.generate("path", 3)
    assert weight(SamplerSpec("iid"), 5, 3) == 1.0
    assert weight(SamplerSpec("srw", path), 3, 1) == pytest.approx(2 / 3)
    assert np.array_equal(weights(SamplerSpec("srrw", path), 3), weights(SamplerSpec("srw", path), 3))
    with pytest.raises(IndexError):
        weight(SamplerSpec("iid"), 3, 3)


@pytest.mark.parametrize("kind", KINDS)
def test_reweighting_identity(kind, rng):
    g = graph.generate("random_connected", 9, 0.4, seed=1)
    spec = spec_for(kind, g)
    G = rng.normal(size=(9, 3))
    pi = stationary_law(spec, 9)
    assert np.allclose((pi * weights(spec, 9)) @ G, G.mean(axis=0), atol=1e-14)
