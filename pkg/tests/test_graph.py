from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from udsgd_lab import graph


def bfs_connected(g):
    seen = {0}
    q = deque([0])
    while q:
        u = q.popleft()
        for v in g.neighbors[u]:
            if v not in seen:
                seen.add(v)
                q.append(v)
    return len(seen) == g.num_nodes


def test_load_path():
    g = graph.load_edge_list("0 1\n1 2")
    assert g.num_nodes == 3
    assert g.degrees.tolist() == [1, 2, 1]


def test_load_disconnected():
    with pytest.raises(graph.DisconnectedGraphError):
        graph.load_edge_list("0 1\n2 3")


def test_load_dedup():
    g = graph.load_edge_list("0 1\n1 0\n0 1")
    assert g.num_nodes == 2
    assert g.degrees.tolist() == [1, 1]
    assert g.num_edges == 1


def test_load_self_loop():
    with pytest.raises(graph.SelfLoopError):
        graph.load_edge_list("0 1\n1 1")


@pytest.mark.parametrize("text", ["0 1\n1", "0 a", "0 1 2"])
def test_load_malformed(text):
    with pytest.raises(graph.GraphParseError):
        graph.load_edge_list(text)


def test_load_reindexes_sparse_ids():
    g = graph.load_edge_list("# comment\n10 20\n\n20 35\n")
    assert g.num_nodes == 3
    assert g.node_labels == (10, 20, 35)
    assert g.degrees.tolist() == [1, 2, 1]


def test_generate_small():
    assert graph.generate("complete", 3).degrees.tolist() == [2, 2, 2]
    assert graph.generate("ring", 4).degrees.tolist() == [2, 2, 2, 2]
    assert graph.generate("path", 4).degrees.tolist() == [1, 2, 2, 1]


def test_random_connected_reproducible():
    a = graph.generate("random_connected", 20, 0.3, seed=7)
    b = graph.generate("random_connected", 20, 0.3, seed=7)
    assert a == b
    assert bfs_connected(a)
    assert a != graph.generate("random_connected", 20, 0.3, seed=8)


def test_generation_failure():
    with pytest.raises(graph.GenerationError):
        graph.generate("random_connected", 40, 0.001, seed=0)


def test_generate_rejects_bad_input():
    with pytest.raises(graph.GraphError):
        graph.generate("ring", 1)
    with pytest.raises(graph.GraphError):
        graph.generate("random_connected", 5)
    with pytest.raises(graph.GraphError):
        graph.generate("star", 5)


def test_edge_list_roundtrip(triangle_tail):
    assert graph.load_edge_list(triangle_tail.to_edge_list()) == triangle_tail


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 25), p=st.floats(0.15, 1.0), seed=st.integers(0, 2**32))
def test_generated_graph_invariants(n, p, seed):
    try:
        g = graph.generate("random_connected", n, p, seed=seed)
    except graph.GenerationError:
        return
    A = g.adjacency()
    assert np.array_equal(A, A.T)
    assert np.all(np.diag(A) == 0)
    assert g.degrees.tolist() == [len(nb) for nb in g.neighbors]
    assert g.degrees.sum() % 2 == 0
    assert all(list(nb) == sorted(nb) for nb in g.neighbors)
    assert bfs_connected(g)


@settings(max_examples=80, deadline=None)
@given(n=st.integers(2, 12), edges=st.lists(st.tuples(st.integers(0, 11), st.integers(0, 11)), max_size=30))
def test_connectivity_matches_bfs(n, edges):
    edges = [(u, v) for u, v in edges if u < n and v < n and u != v]
    adj = {i: set() for i in range(n)}
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    seen, q = {0}, deque([0])
    while q:
        u = q.popleft()
        for v in adj[u] - seen:
            seen.add(v)
            q.append(v)
    assert graph.is_connected(n, edges) == (len(seen) == n)
