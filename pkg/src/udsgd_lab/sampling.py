"""Per-agent data sampling processes and gradient reweighting.

Each sampler emits local data indices ``0..size-1``. Walk samplers move on a
graph whose node ``j`` holds local data point ``j``. All randomness comes from
the sampler's own ``numpy.random.Generator``; one uniform is consumed per move
(or per draw for i.i.d.), so ``draw(n)`` and ``n`` calls to ``next()`` give
the same sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import _kernels
from .graph import Graph

KINDS = ("iid", "shuffle", "srw", "nbrw", "srrw")
WALK_KINDS = ("srw", "nbrw", "srrw")


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerSpec:
    """Sampling strategy of one agent.

    ``alpha`` (self-repellence force) and ``b`` (empirical-measure step-size
    exponent) only matter for ``srrw``.
    """

    kind: str
    graph: Optional[Graph] = None
    alpha: float = 20.0
    b: float = 0.8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SamplerError(f"unknown sampler kind {self.kind!r}; expected one of {KINDS}")
        if self.alpha < 0:
            raise SamplerError("alpha must be nonnegative")
        if not (0.5 < self.b <= 1.0):
            raise SamplerError("b must lie in (0.5, 1]")
        if self.kind in WALK_KINDS and self.graph is None:
            raise SamplerError(f"{self.kind} needs a graph")

    @property
    def is_walk(self) -> bool:
        return self.kind in WALK_KINDS


class Sampler:
    """Base class; subclasses implement ``_draw(n)``."""

    size: int

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng

    def next(self) -> int:
        return int(self.draw(1)[0])

    def draw(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.empty(0, dtype=np.int64)
        return self._draw(n)

    def _draw(self, n: int) -> np.ndarray:
        raise NotImplementedError


class IIDSampler(Sampler):
    def _draw(self, n):
        out = (self.rng.random(n) * self.size).astype(np.int64)
        np.minimum(out, self.size - 1, out=out)
        return out


class ShuffleSampler(Sampler):
    """Single shuffling: one permutation drawn at start, replayed every epoch."""

    def __init__(self, size, rng):
        super().__init__(size, rng)
        self.permutation = rng.permutation(size).astype(np.int64)
        self.cursor = 0

    def _draw(self, n):
        pos = (self.cursor + np.arange(n)) % self.size
        self.cursor = int((self.cursor + n) % self.size)
        return self.permutation[pos]


class _WalkSampler(Sampler):
    def __init__(self, graph: Graph, rng):
        super().__init__(graph.num_nodes, rng)
        self.graph = graph
        self.indptr, self.indices = graph.csr()
        self.current = min(int(rng.random() * self.size), self.size - 1)
        self.started = False

    def _draw(self, n):
        out = np.empty(n, dtype=np.int64)
        k = 0
        if not self.started:
            self.started = True
            out[0] = self.current
            k = 1
        if k < n:
            self._move(self.rng.random(n - k), out[k:])
        return out

    def _move(self, u, out):
        raise NotImplementedError


class SRWSampler(_WalkSampler):
    def _move(self, u, out):
        self.current = int(_kernels.srw_block(self.indptr, self.indices, self.current, u, out))


class NBRWSampler(_WalkSampler):
    def __init__(self, graph, rng):
        super().__init__(graph, rng)
        self.previous = -1

    def _move(self, u, out):
        cur, prev = _kernels.nbrw_block(self.indptr, self.indices, self.current,
                                        self.previous, u, out)
        self.current, self.previous = int(cur), int(prev)


class SRRWSampler(_WalkSampler):
    """Self-repellent random walk with SRW baseline (target ``mu`` ∝ degree).

    ``x`` is the empirical measure, initialised to ``1/N`` (every node counted
    once); ``step`` counts moves made so far.
    """

    def __init__(self, graph, rng, alpha=20.0, b=0.8):
        super().__init__(graph, rng)
        self.alpha = float(alpha)
        self.b = float(b)
        deg = graph.degrees.astype(float)
        self.mu = deg / deg.sum()
        self._log_mu = np.log(self.mu)
        self.x = np.full(self.size, 1.0 / self.size)
        self.step = 0

    def transition_row(self, node: Optional[int] = None) -> np.ndarray:
        """Current kernel row ``K[x](node, .)``."""
        node = self.current if node is None else node
        P_row = np.zeros(self.size)
        nb = list(self.graph.neighbors[node])
        P_row[nb] = 1.0 / len(nb)
        w = P_row * (self.x / self.mu) ** (-self.alpha)
        return w / w.sum()

    def _move(self, u, out):
        cur, step = _kernels.srrw_block(self.indptr, self.indices, self._log_mu, self.alpha,
                                        self.b, self.x, self.current, self.step, u, out)
        self.current, self.step = int(cur), int(step)


class ChainSampler(Sampler):
    """Generic finite chain with an explicit transition matrix.

    ``init`` is the initial distribution (default: stationary ``pi`` when
    given, otherwise uniform).
    """

    def __init__(self, P: np.ndarray, rng, init: Optional[np.ndarray] = None):
        P = np.asarray(P, dtype=float)
        super().__init__(P.shape[0], rng)
        self.cum_P = np.cumsum(P, axis=1)
        p0 = np.full(self.size, 1.0 / self.size) if init is None else np.asarray(init, float)
        c0 = np.cumsum(p0)
        self.current = int(min(np.searchsorted(c0, rng.random() * c0[-1], side="right"),
                               self.size - 1))
        self.started = False

    def _draw(self, n):
        out = np.empty(n, dtype=np.int64)
        k = 0
        if not self.started:
            self.started = True
            out[0] = self.current
            k = 1
        if k < n:
            self.current = int(_kernels.chain_block(self.cum_P, self.current,
                                                    self.rng.random(n - k), out[k:]))
        return out


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def make_sampler(spec: SamplerSpec, dataset_size: int,
                 seed: Union[int, np.random.SeedSequence, np.random.Generator, None] = 0) -> Sampler:
    """Instantiate the sampling process of one agent."""
    if dataset_size < 1:
        raise SamplerError("dataset_size must be >= 1")
    if spec.is_walk and spec.graph.num_nodes != dataset_size:
        raise SamplerError(
            f"{spec.kind} graph has {spec.graph.num_nodes} nodes but dataset has {dataset_size} points"
        )
    rng = _as_rng(seed)
    if spec.kind == "iid":
        return IIDSampler(dataset_size, rng)
    if spec.kind == "shuffle":
        return ShuffleSampler(dataset_size, rng)
    if spec.kind == "srw":
        return SRWSampler(spec.graph, rng)
    if spec.kind == "nbrw":
        return NBRWSampler(spec.graph, rng)
    return SRRWSampler(spec.graph, rng, spec.alpha, spec.b)


def stationary_law(spec: SamplerSpec, dataset_size: int) -> np.ndarray:
    """Limiting visit distribution: uniform for iid/shuffle, ∝ degree for walks."""
    if spec.is_walk:
        deg = spec.graph.degrees.astype(float)
        return deg / deg.sum()
    return np.full(dataset_size, 1.0 / dataset_size)


def weights(spec: SamplerSpec, dataset_size: int) -> np.ndarray:
    """Gradient weights ``1 / (size * pi(x))`` making the sampler target the
    uniform average over the local dataset."""
    if not spec.is_walk:
        return np.ones(dataset_size)
    deg = spec.graph.degrees.astype(float)
    return deg.sum() / (dataset_size * deg)


def weight(spec: SamplerSpec, dataset_size: int, index: int) -> float:
    if not 0 <= index < dataset_size:
        raise IndexError(f"index {index} out of range for size {dataset_size}")
    return float(weights(spec, dataset_size)[index])
