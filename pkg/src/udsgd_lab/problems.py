"""Objectives with exact gradients and Hessians, data ingestion and
partitioning, and the optimum oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log1p


class ProblemError(ValueError):
    pass


class LibsvmParseError(ProblemError):
    pass


class NonConvergenceError(ProblemError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray   # (n, d)
    labels: np.ndarray     # (n,) in {0, 1}

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.labels) != self.features.shape[0]:
            raise ProblemError("features/labels shape mismatch")
        if not np.all(np.isin(self.labels, (0.0, 1.0))):
            raise ProblemError("labels must be binary")

    def __len__(self):
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def parse_libsvm(text: str) -> Dataset:
    """Parse ``label idx:val ...`` lines (1-based sparse indices) into a dense
    dataset. Labels ``-1/+1`` (or ``0/1``) map to ``0/1``."""
    rows, labels = [], []
    d = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            lab = float(parts[0])
        except ValueError:
            raise LibsvmParseError(f"line {lineno}: bad label {parts[0]!r}") from None
        if lab not in (-1.0, 0.0, 1.0):
            raise LibsvmParseError(f"line {lineno}: label {parts[0]!r} is not binary")
        entries = {}
        for tok in parts[1:]:
            idx, sep, val = tok.partition(":")
            try:
                k, v = int(idx), float(val)
            except ValueError:
                raise LibsvmParseError(f"line {lineno}: bad feature token {tok!r}") from None
            if not sep or k < 1:
                raise LibsvmParseError(f"line {lineno}: bad feature token {tok!r}")
            entries[k - 1] = v
            d = max(d, k)
        rows.append(entries)
        labels.append(1.0 if lab > 0 else 0.0)
    if not rows:
        raise LibsvmParseError("empty dataset")
    X = np.zeros((len(rows), d))
    for i, entries in enumerate(rows):
        for k, v in entries.items():
            X[i, k] = v
    return Dataset(X, np.array(labels))


def synthetic_classification(n_points: int, d: int, separation: float = 1.0,
                             seed: int = 0) -> Dataset:
    """Two Gaussian blobs at ``+-separation/2`` along a random unit direction."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    y = (rng.random(n_points) < 0.5).astype(float)
    X = rng.normal(size=(n_points, d)) + np.outer(y - 0.5, direction) * separation
    return Dataset(X, y)


@dataclass(frozen=True)
class Partition:
    agent_indices: Tuple[np.ndarray, ...]

    @property
    def N(self) -> int:
        return len(self.agent_indices)

    def sizes(self) -> List[int]:
        return [len(ix) for ix in self.agent_indices]

    @classmethod
    def contiguous(cls, sizes: Sequence[int]) -> "Partition":
        offs = np.concatenate([[0], np.cumsum(sizes)])
        return cls(tuple(np.arange(offs[i], offs[i + 1]) for i in range(len(sizes))))


def partition(n_points: int, N: int, mode: str = "even", seed: int = 0, labels=None,
              alpha_dir: float = 0.5, min_size: int = 1, max_attempts: int = 1000) -> Partition:
    """Split ``n_points`` indices over ``N`` agents.

    ``even`` deals a random permutation into near-equal blocks. ``dirichlet``
    draws, per class, agent proportions from ``Dirichlet(alpha_dir)``, redrawing
    until every agent holds at least ``min_size`` points.
    """
    if N < 1 or N * min_size > n_points:
        raise ProblemError(f"cannot give {N} agents >= {min_size} of {n_points} points")
    rng = np.random.default_rng(seed)
    if mode == "even":
        perm = rng.permutation(n_points)
        return Partition(tuple(np.sort(b) for b in np.array_split(perm, N)))
    if mode != "dirichlet":
        raise ProblemError(f"unknown partition mode {mode!r}")
    labels = np.zeros(n_points) if labels is None else np.asarray(labels)
    classes = np.unique(labels)
    for _ in range(max_attempts):
        buckets: List[List[int]] = [[] for _ in range(N)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            p = rng.dirichlet(np.full(N, alpha_dir))
            cuts = (np.cumsum(p)[:-1] * len(idx)).astype(int)
            for a, part in enumerate(np.split(idx, cuts)):
                buckets[a].extend(part.tolist())
        if min(len(b) for b in buckets) >= min_size:
            return Partition(tuple(np.sort(np.array(b, dtype=np.int64)) for b in buckets))
    raise ProblemError("dirichlet partition kept leaving agents below min_size")


def logistic_loss(theta, x, y, kappa):
    z = float(np.dot(theta, x))
    # log(1 + e^z) computed without overflow
    softplus = max(z, 0.0) + log1p(np.exp(-abs(z)))
    return softplus - y * z + 0.5 * kappa * float(np.dot(theta, theta))


def logistic_grad(theta, x, y, kappa):
    """``x (sigmoid(theta.x) - y) + kappa theta``."""
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    return x * (expit(np.dot(theta, x)) - y) + kappa * theta


@dataclass(frozen=True)
class Problem:
    """Distributed objective ``f = (1/N) sum_i f_i`` with ``f_i`` the average of
    per-sample losses over agent ``i``'s points.

    ``kind`` is ``'quadratic'`` (``data`` holds centres, loss
    ``0.5 (theta-c)^T A (theta-c)``) or ``'logistic'`` (``data`` holds features).
    """

    kind: str
    data: np.ndarray
    partition: Partition
    labels: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    kappa: float = 1.0

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @property
    def N(self) -> int:
        return self.partition.N

    def local_size(self, agent: int) -> int:
        return len(self.partition.agent_indices[agent])

    def sample_grads(self, theta, index) -> np.ndarray:
        """Per-sample gradients for global indices ``index`` (rows)."""
        theta = np.asarray(theta, dtype=float)
        Xs = self.data[np.atleast_1d(index)]
        if self.kind == "quadratic":
            return (theta - Xs) @ self.A.T
        resid = expit(Xs @ theta) - self.labels[np.atleast_1d(index)]
        return Xs * resid[:, None] + self.kappa * theta

    def grad(self, agent: int, theta, local_index: int) -> np.ndarray:
        g = self.partition.agent_indices[agent][local_index]
        return self.sample_grads(theta, g)[0]

    def agent_grads(self, agent: int, theta) -> np.ndarray:
        return self.sample_grads(theta, self.partition.agent_indices[agent])

    def full_grad(self, theta) -> np.ndarray:
        return np.mean([self.agent_grads(i, theta).mean(axis=0) for i in range(self.N)], axis=0)

    def loss(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        out = 0.0
        for ix in self.partition.agent_indices:
            Xs = self.data[ix]
            if self.kind == "quadratic":
                R = theta - Xs
                out += 0.5 * np.mean(np.einsum("ij,jk,ik->i", R, self.A, R))
            else:
                z = Xs @ theta
                sp = np.maximum(z, 0) + log1p(np.exp(-np.abs(z)))
                out += np.mean(sp - self.labels[ix] * z) + 0.5 * self.kappa * theta @ theta
        return float(out / self.N)

    def hessian(self, theta) -> np.ndarray:
        if self.kind == "quadratic":
            return self.A.copy()
        theta = np.asarray(theta, dtype=float)
        H = np.zeros((self.d, self.d))
        for ix in self.partition.agent_indices:
            Xs = self.data[ix]
            s = expit(Xs @ theta)
            H += (Xs * (s * (1 - s))[:, None]).T @ Xs / len(ix)
        H = H / self.N + self.kappa * np.eye(self.d)
        return 0.5 * (H + H.T)


def quadratic_problem(A, centers, partition: Optional[Partition] = None) -> Problem:
    """Quadratic testbed with Hessian ``A`` everywhere.

    ``centers`` is an ``(n, d)`` array (split by ``partition``, default: one
    agent) or a list of per-agent ``(n_i, d)`` arrays.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1] or not np.allclose(A, A.T, atol=1e-12):
        raise ProblemError("A must be symmetric")
    if np.linalg.eigvalsh(A)[0] <= 0:
        raise ProblemError("A must be positive definite")
    if isinstance(centers, (list, tuple)):
        blocks = [np.atleast_2d(np.asarray(c, dtype=float)) for c in centers]
        data = np.vstack(blocks)
        partition = Partition.contiguous([len(b) for b in blocks])
    else:
        data = np.atleast_2d(np.asarray(centers, dtype=float))
        if partition is None:
            partition = Partition((np.arange(len(data)),))
    if data.shape[1] != A.shape[0]:
        raise ProblemError("centres and A disagree on dimension")
    return Problem("quadratic", data, partition, A=A)


def logistic_problem(dataset: Dataset, partition: Partition, kappa: float = 1.0) -> Problem:
    if kappa <= 0:
        raise ProblemError("kappa must be positive for a strongly convex objective")
    return Problem("logistic", dataset.features, partition, labels=dataset.labels, kappa=kappa)


@dataclass(frozen=True)
class Optimum:
    theta: np.ndarray
    H: np.ndarray
    mu: float


def solve_optimum(p: Problem, tol: float = 1e-10, max_iter: int = 200) -> Optimum:
    """Newton's method on ``f``; returns ``theta*``, ``H = hess f(theta*)`` and its
    smallest eigenvalue."""
    if p.kind == "quadratic":
        # constant Hessian: the Newton step lands on the agent-averaged centre
        theta = np.mean([p.data[ix].mean(axis=0) for ix in p.partition.agent_indices], axis=0)
        mu = float(np.linalg.eigvalsh(p.A)[0])
        return Optimum(theta, p.A.copy(), mu)
    theta = np.zeros(p.d)
    for _ in range(max_iter):
        g = p.full_grad(theta)
        if np.linalg.norm(g) < tol:
            break
        step = np.linalg.solve(p.hessian(theta), g)
        f0, t = p.loss(theta), 1.0
        while p.loss(theta - t * step) > f0 and t > 1e-8:
            t *= 0.5
        theta = theta - t * step
    else:
        g = p.full_grad(theta)
        if np.linalg.norm(g) >= tol:
            raise NonConvergenceError(f"Newton stopped with |grad f| = {np.linalg.norm(g):.3e}")
    H = p.hessian(theta)
    mu = float(np.linalg.eigvalsh(H)[0])
    if mu <= 0:
        raise ProblemError("Hessian at the optimum is not positive definite")
    return Optimum(theta, H, mu)
