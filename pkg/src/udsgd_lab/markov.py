"""Finite Markov chain analysis: stationary laws, fundamental matrix,
Poisson-equation solutions and asymptotic covariance matrices.

The asymptotic covariance of a test function ``g`` along an ergodic chain is
``lim n Var(mean of g(X_0..X_{n-1}))``. It is computed three independent ways:
closed form through the fundamental matrix, the truncated autocovariance
series, and Monte Carlo over simulated chains.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import gcd
from typing import List, Tuple, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .graph import Graph
from .sampling import ChainSampler, SamplerSpec, make_sampler


class MarkovError(ValueError):
    pass


class NonErgodicError(MarkovError):
    pass


class SingularMatrixError(MarkovError):
    pass


ROW_SUM_TOL = 1e-12


def check_transition_matrix(P) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise MarkovError(f"transition matrix must be square, got shape {P.shape}")
    if np.any(P < 0) or not np.all(np.isfinite(P)):
        raise MarkovError("transition matrix has negative or non-finite entries")
    if np.max(np.abs(P.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
        raise MarkovError("transition matrix rows do not sum to 1")
    return P


def period(P) -> int:
    """Period of an irreducible chain (gcd of level differences along edges of
    a BFS tree from state 0)."""
    P = np.asarray(P)
    n = P.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(P[u] > 0):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    d = 0
    for u in range(n):
        for v in np.flatnonzero(P[u] > 0):
            d = gcd(d, int(abs(level[u] + 1 - level[v])))
    return d


def is_irreducible(P) -> bool:
    P = np.asarray(P)
    n_comp, _ = connected_components(csr_matrix(P > 0), directed=True, connection="strong")
    return n_comp == 1


def validate_ergodic(P) -> np.ndarray:
    P = check_transition_matrix(P)
    if not is_irreducible(P):
        raise NonErgodicError("chain is not irreducible")
    p = period(P)
    if p != 1:
        raise NonErgodicError(f"chain is periodic with period {p}")
    return P


def srw_kernel(g: Graph) -> np.ndarray:
    A = g.adjacency()
    return A / A.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class LiftedChain:
    """NBRW as a Markov chain on directed edges ``(prev, current)``.

    ``head[s]`` is the current node of edge-state ``s``; a node-level test
    function ``G`` lifts to ``G[head]``.
    """

    P: np.ndarray
    edges: Tuple[Tuple[int, int], ...]
    head: np.ndarray

    def lift(self, G: np.ndarray) -> np.ndarray:
        return np.asarray(G)[self.head]


def nbrw_lifted_kernel(g: Graph) -> LiftedChain:
    edges = [(u, v) for u in range(g.num_nodes) for v in g.neighbors[u]]
    index = {e: s for s, e in enumerate(edges)}
    P = np.zeros((len(edges), len(edges)))
    for s, (u, v) in enumerate(edges):
        nb = g.neighbors[v]
        if len(nb) == 1:
            P[s, index[(v, u)]] = 1.0
            continue
        for w in nb:
            if w != u:
                P[s, index[(v, w)]] = 1.0 / (len(nb) - 1)
    head = np.array([v for _, v in edges], dtype=np.int64)
    return LiftedChain(P, tuple(edges), head)


def stationary(P) -> np.ndarray:
    """Stationary distribution of an ergodic chain.

    Solves ``(I - P^T) pi = 0`` with one equation replaced by ``sum(pi) = 1``;
    falls back to power iteration if the direct solve is inaccurate.
    """
    P = check_transition_matrix(P)
    if not is_irreducible(P):
        raise NonErgodicError("chain is not irreducible")
    n = P.shape[0]
    A = np.eye(n) - P.T
    A[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        pi = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        pi = None
    if pi is None or np.max(np.abs(pi @ P - pi)) > 1e-12 or np.any(pi <= 0):
        pi = _power_iteration(P)
    return pi


def _power_iteration(P, tol=1e-12, max_iter=1_000_000):
    n = P.shape[0]
    # lazy version converges for periodic chains too
    Q = 0.5 * (np.eye(n) + P)
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        new = pi @ Q
        new /= new.sum()
        if np.max(np.abs(new - pi)) < tol:
            pi = new
            break
        pi = new
    if np.any(pi <= 0):
        raise NonErgodicError("stationary distribution has zero entries")
    return pi


def fundamental_matrix(P, pi=None) -> np.ndarray:
    """``Z = (I - P + 1 pi^T)^{-1}``."""
    P = validate_ergodic(P)
    pi = stationary(P) if pi is None else np.asarray(pi, dtype=float)
    n = P.shape[0]
    B = np.eye(n) - P + np.outer(np.ones(n), pi)
    try:
        Z = np.linalg.inv(B)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("I - P + 1 pi^T is singular") from exc
    if np.max(np.abs(Z @ B - np.eye(n))) > 1e-10:
        raise SingularMatrixError("fundamental matrix inversion is numerically unstable")
    return Z


def _as_table(G, n) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if G.shape[0] != n:
        raise MarkovError(f"function table has {G.shape[0]} rows for {n} states")
    if not np.all(np.isfinite(G)):
        raise MarkovError("function table has non-finite entries")
    return G


def poisson_solution(P, pi, G) -> np.ndarray:
    """Rows ``m(x) = sum_y Z(x, y) (g(y) - mu)``, solving ``m - P m = g - mu``."""
    P = check_transition_matrix(P)
    pi = np.asarray(pi, dtype=float)
    G = _as_table(G, P.shape[0])
    Z = fundamental_matrix(P, pi)
    return Z @ (G - pi @ G)


def asymptotic_covariance(P, pi, G) -> np.ndarray:
    """Closed-form asymptotic covariance ``Gc^T (D Z + Z^T D - D) Gc`` with
    ``D = diag(pi)`` and ``Gc`` the pi-centred function table."""
    P = check_transition_matrix(P)
    pi = np.asarray(pi, dtype=float)
    G = _as_table(G, P.shape[0])
    Z = fundamental_matrix(P, pi)
    Gc = G - pi @ G
    D = np.diag(pi)
    S = Gc.T @ (D @ Z + Z.T @ D - D) @ Gc
    return 0.5 * (S + S.T)


def asymptotic_covariance_series(P, pi, G, k_max: int, return_increments: bool = False):
    """Truncated autocovariance series
    ``Cov_pi(g) + sum_{k=1}^{k_max} (C_k + C_k^T)``, ``C_k = Gc^T D (P^k - 1 pi^T) Gc``.

    With ``return_increments`` also returns the spectral norm of each added
    lag term, which decays geometrically for ergodic chains.
    """
    P = check_transition_matrix(P)
    pi = np.asarray(pi, dtype=float)
    G = _as_table(G, P.shape[0])
    Gc = G - pi @ G
    DG = pi[:, None] * Gc
    S = Gc.T @ DG
    Y = Gc.copy()
    increments = []
    for _ in range(int(k_max)):
        # P^k Gc == (P^k - 1 pi^T) Gc since pi^T Gc = 0
        Y = P @ Y
        Y -= pi @ Y
        C = DG.T @ Y
        S = S + C + C.T
        if return_increments:
            increments.append(float(np.linalg.norm(C + C.T, 2)))
    S = 0.5 * (S + S.T)
    if return_increments:
        return S, np.array(increments)
    return S


@dataclass(frozen=True)
class MCEstimate:
    cov: np.ndarray
    se: np.ndarray
    n: int
    trials: int


def asymptotic_covariance_mc(sampler: Union[SamplerSpec, np.ndarray], G, n: int, trials: int,
                             seed: int, threads: int = 1, init=None) -> MCEstimate:
    """Monte-Carlo estimate of ``n Var(mu_hat_n(g))`` over independent runs.

    ``sampler`` is a :class:`SamplerSpec` or an explicit transition matrix; an
    explicit chain starts from ``init`` (default: its stationary law). Trial
    ``r`` uses the stream ``SeedSequence(seed, spawn_key=(r,))``, so results do
    not depend on ``threads``. Standard errors are per entry (Gaussian
    sample-covariance formula).
    """
    if n < 1000:
        raise ValueError("horizon n must be >= 1000")
    if trials < 50:
        raise ValueError("need at least 50 trials")
    if isinstance(sampler, SamplerSpec):
        size = sampler.graph.num_nodes if sampler.is_walk else np.asarray(G).shape[0]
        G = _as_table(G, size)

        def factory(ss):
            return make_sampler(sampler, size, np.random.default_rng(ss))
    else:
        P = check_transition_matrix(sampler)
        size = P.shape[0]
        G = _as_table(G, size)
        p0 = stationary(P) if init is None else np.asarray(init, float)

        def factory(ss):
            return ChainSampler(P, np.random.default_rng(ss), init=p0)

    # shifting g by a constant leaves the covariance unchanged and makes
    # constant functions exactly zero
    Gs = G - G[0]

    def one(r):
        s = factory(np.random.SeedSequence(seed, spawn_key=(r,)))
        counts = np.bincount(s.draw(n), minlength=size).astype(float)
        return counts @ Gs / np.sqrt(n)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            Y = np.array(list(ex.map(one, range(trials))))
    else:
        Y = np.array([one(r) for r in range(trials)])
    Yc = Y - Y.mean(axis=0)
    cov = Yc.T @ Yc / (trials - 1)
    # each trial's scaled sum is asymptotically Gaussian, so the Wishart
    # variance (S_ij^2 + S_ii S_jj) / (R - 1) gives the per-entry error
    diag = np.diag(cov)
    se = np.sqrt((cov ** 2 + np.outer(diag, diag)) / (trials - 1))
    return MCEstimate(cov, se, n, trials)


def loewner_compare(A, B, tol: float = 1e-8) -> str:
    """Classify ``A - B``: 'A_dominates', 'B_dominates', 'equal' or 'incomparable'."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise MarkovError(f"dimension mismatch: {A.shape} vs {B.shape}")
    D = A - B
    ev = np.linalg.eigvalsh(0.5 * (D + D.T))
    lo, hi = ev[0], ev[-1]
    if lo >= -tol and hi <= tol:
        return "equal"
    if lo >= -tol:
        return "A_dominates"
    if hi <= tol:
        return "B_dominates"
    return "incomparable"


def random_ergodic_chain(n: int, rng: np.random.Generator, density: float = 0.6) -> np.ndarray:
    """Random ergodic kernel: a random cycle (irreducibility) plus random
    extra edges and self-loops (aperiodicity), rows drawn from a Dirichlet."""
    mask = rng.random((n, n)) < density
    perm = rng.permutation(n)
    mask[perm, np.roll(perm, -1)] = True
    mask[np.arange(n), np.arange(n)] |= rng.random(n) < 0.5
    mask[0, 0] = True
    P = np.zeros((n, n))
    for i in range(n):
        cols = np.flatnonzero(mask[i])
        P[i, cols] = rng.dirichlet(np.ones(len(cols)))
    return P


def chain_set(n_chains: int, seed: int, max_states: int = 10) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [random_ergodic_chain(int(rng.integers(2, max_states + 1)), rng) for _ in range(n_chains)]
