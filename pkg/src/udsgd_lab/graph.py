"""Undirected graphs used as agent communication topologies and as
per-agent dataset graphs for random-walk sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

MAX_GENERATION_ATTEMPTS = 1000


class GraphError(ValueError):
    pass


class GraphParseError(GraphError):
    pass


class DisconnectedGraphError(GraphError):
    pass


class SelfLoopError(GraphError):
    pass


class GenerationError(GraphError):
    pass


@dataclass(frozen=True)
class Graph:
    """Connected, undirected, simple graph on nodes ``0..num_nodes-1``.

    Construct through :func:`from_edges`, :func:`load_edge_list` or
    :func:`generate`; those validate symmetry, self-loops and connectivity.
    ``node_labels`` holds the original ids when the input was re-indexed.
    """

    num_nodes: int
    neighbors: Tuple[Tuple[int, ...], ...]
    node_labels: Optional[Tuple[int, ...]] = field(default=None, compare=False)

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors], dtype=np.int64)

    @property
    def num_edges(self) -> int:
        return int(self.degrees.sum()) // 2

    def edges(self) -> List[Tuple[int, int]]:
        return [(u, v) for u, nb in enumerate(self.neighbors) for v in nb if u < v]

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.num_nodes, self.num_nodes))
        for u, nb in enumerate(self.neighbors):
            A[u, list(nb)] = 1.0
        return A

    def csr(self) -> Tuple[np.ndarray, np.ndarray]:
        """(indptr, indices) arrays of the sorted adjacency lists."""
        indptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        indptr[1:] = np.cumsum(self.degrees)
        indices = np.array([v for nb in self.neighbors for v in nb], dtype=np.int64)
        return indptr, indices

    def to_edge_list(self) -> str:
        return "".join(f"{u} {v}\n" for u, v in self.edges())


def is_connected(num_nodes: int, edges: Sequence[Tuple[int, int]]) -> bool:
    if num_nodes <= 1:
        return True
    if not edges:
        return False
    e = np.asarray(edges, dtype=np.int64)
    m = csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(num_nodes, num_nodes))
    n_comp, _ = connected_components(m, directed=False)
    return n_comp == 1


def from_edges(num_nodes: int, edges: Sequence[Tuple[int, int]]) -> Graph:
    """Build a validated graph from (possibly duplicated, either-direction) edges."""
    if num_nodes < 1:
        raise GraphError("graph needs at least one node")
    adj: List[set] = [set() for _ in range(num_nodes)]
    for u, v in edges:
        if u == v:
            raise SelfLoopError(f"self-loop on node {u}")
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise GraphError(f"edge ({u}, {v}) out of range for {num_nodes} nodes")
        adj[u].add(v)
        adj[v].add(u)
    if not is_connected(num_nodes, [(u, v) for u in range(num_nodes) for v in adj[u]]):
        raise DisconnectedGraphError(f"graph on {num_nodes} nodes is not connected")
    return Graph(num_nodes, tuple(tuple(sorted(s)) for s in adj))


def load_edge_list(text: str) -> Graph:
    """Parse newline-delimited ``u v`` pairs.

    Blank lines and ``#`` comments are skipped. Ids that are not dense are
    re-indexed in sorted order; the original ids are kept in
    ``Graph.node_labels``.
    """
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphParseError(f"line {lineno}: expected 'u v', got {raw!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphParseError(f"line {lineno}: non-integer node id in {raw!r}") from None
        if u < 0 or v < 0:
            raise GraphParseError(f"line {lineno}: negative node id")
        if u == v:
            raise SelfLoopError(f"line {lineno}: self-loop on node {u}")
        pairs.append((u, v))
    if not pairs:
        raise GraphParseError("edge list is empty")
    ids = sorted({x for p in pairs for x in p})
    labels = None
    if ids != list(range(len(ids))):
        mapping: Dict[int, int] = {old: new for new, old in enumerate(ids)}
        pairs = [(mapping[u], mapping[v]) for u, v in pairs]
        labels = tuple(ids)
    g = from_edges(len(ids), pairs)
    if labels is not None:
        g = Graph(g.num_nodes, g.neighbors, labels)
    return g


def generate(kind: str, n: int, edge_prob: Optional[float] = None, seed: int = 0) -> Graph:
    """Generate a connected graph.

    Parameters
    ----------
    kind : {'path', 'ring', 'complete', 'random_connected'}
    n : int
        Number of nodes, at least 2.
    edge_prob : float, optional
        Erdos-Renyi edge probability, required for ``random_connected``.
    seed : int
        Seed for ``random_connected``; the same seed gives the same graph.
    """
    if n < 2:
        raise GraphError("n must be >= 2")
    if kind == "path":
        return from_edges(n, [(i, i + 1) for i in range(n - 1)])
    if kind == "ring":
        if n < 3:
            return from_edges(n, [(0, 1)])
        return from_edges(n, [(i, (i + 1) % n) for i in range(n)])
    if kind == "complete":
        return from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])
    if kind == "random_connected":
        if edge_prob is None or not (0.0 < edge_prob <= 1.0):
            raise GraphError("random_connected needs 0 < edge_prob <= 1")
        rng = np.random.default_rng(seed)
        iu, ju = np.triu_indices(n, k=1)
        for _ in range(MAX_GENERATION_ATTEMPTS):
            keep = rng.random(len(iu)) < edge_prob
            edges = list(zip(iu[keep].tolist(), ju[keep].tolist()))
            if is_connected(n, edges):
                return from_edges(n, edges)
        raise GenerationError(
            f"no connected G({n}, {edge_prob}) sample in {MAX_GENERATION_ATTEMPTS} attempts"
        )
    raise GraphError(f"unknown graph kind {kind!r}")
