"""Communication matrices, aggregation schedules and step sizes."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .graph import Graph

DS_TOL = 1e-12
PATTERN_KINDS = ("full_average", "partial_participation", "decentralized_fixed",
                 "decentralized_time_varying")
INTERVAL_KINDS = ("constant", "log_growth", "loglog_growth")


class CommunicationError(ValueError):
    pass


class ScheduleConfigError(CommunicationError):
    pass


def is_doubly_stochastic(W, tol: float = DS_TOL) -> bool:
    W = np.asarray(W)
    return (
        W.ndim == 2 and W.shape[0] == W.shape[1]
        and bool(np.all(W >= -tol))
        and float(np.max(np.abs(W.sum(axis=0) - 1))) <= tol
        and float(np.max(np.abs(W.sum(axis=1) - 1))) <= tol
    )


def slem(W) -> float:
    """Second-largest eigenvalue modulus of a symmetric matrix."""
    ev = np.sort(np.abs(np.linalg.eigvalsh(0.5 * (W + W.T))))[::-1]
    return float(ev[1]) if len(ev) > 1 else 0.0


def mh_matrix(g: Graph) -> np.ndarray:
    """Metropolis-Hastings weights ``min(1/d_i, 1/d_j)`` on edges, remainder on
    the diagonal."""
    n = g.num_nodes
    deg = g.degrees
    W = np.zeros((n, n))
    for i, nb in enumerate(g.neighbors):
        for j in nb:
            W[i, j] = min(1.0 / deg[i], 1.0 / deg[j])
    W[np.arange(n), np.arange(n)] = 1.0 - W.sum(axis=1)
    return W


def full_average(N: int) -> np.ndarray:
    if N < 1:
        raise CommunicationError("N must be >= 1")
    return np.full((N, N), 1.0 / N)


def selection_matrix(N: int, selected: Sequence[int]) -> np.ndarray:
    """``W_S``: uniform averaging on ``S x S``, identity elsewhere."""
    S = sorted(int(s) for s in selected)
    W = np.eye(N)
    W[np.ix_(S, S)] = 1.0 / len(S)
    return W


def routing_matrix(N: int, prev: Sequence[int], new: Sequence[int]) -> np.ndarray:
    """Permutation ``T`` so that ``T W_S`` hands the block average of ``prev`` to
    every agent of ``new``.

    Agents in both sets and agents in neither keep their own rows; each agent
    leaving the selection takes over the row of an agent that joins it.
    """
    prev_s, new_s = set(map(int, prev)), set(map(int, new))
    if len(prev_s) != len(new_s):
        raise CommunicationError("selected sets must have equal size")
    T = np.zeros((N, N))
    joining = sorted(new_s - prev_s)
    leaving = sorted(prev_s - new_s)
    for i in range(N):
        if (i in prev_s) == (i in new_s):
            T[i, i] = 1.0
    for i, j in zip(joining, leaving):
        T[i, j] = 1.0   # joiner reads the averaged row of a leaver
        T[j, i] = 1.0   # leaver keeps the joiner's stale parameter
    return T


def client_sampling_matrix(N: int, prev: Sequence[int], new: Sequence[int]) -> np.ndarray:
    return routing_matrix(N, prev, new) @ selection_matrix(N, prev)


def draw_client_sampling_matrix(N: int, size: int, prev_selected: Sequence[int],
                                rng: np.random.Generator) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Draw ``S'`` uniformly without replacement and return ``(T_{S->S'} W_S, S')``."""
    if not 1 <= size <= N:
        raise CommunicationError(f"participation size {size} must lie in [1, {N}]")
    if len(prev_selected) != size:
        raise CommunicationError("previous selection has the wrong size")
    new = tuple(sorted(int(i) for i in rng.choice(N, size=size, replace=False)))
    return client_sampling_matrix(N, prev_selected, new), new


@dataclass(frozen=True)
class CommPattern:
    """How ``W`` is chosen at each aggregation time.

    ``matrices`` holds the single W of ``decentralized_fixed`` or the candidate
    list of ``decentralized_time_varying`` (drawn uniformly).
    """

    kind: str
    N: int
    participation: Optional[int] = None
    matrices: Tuple[np.ndarray, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise CommunicationError(f"unknown pattern kind {self.kind!r}")
        if self.kind == "partial_participation":
            if self.participation is None or not 1 <= self.participation <= self.N:
                raise CommunicationError("partial_participation needs 1 <= participation <= N")
        if self.kind.startswith("decentralized"):
            if not self.matrices:
                raise CommunicationError(f"{self.kind} needs mixing matrices")
            if self.kind == "decentralized_fixed" and len(self.matrices) != 1:
                raise CommunicationError("decentralized_fixed takes exactly one matrix")
            for W in self.matrices:
                if W.shape != (self.N, self.N) or not is_doubly_stochastic(W):
                    raise CommunicationError("mixing matrix is not doubly stochastic N x N")

    @property
    def is_random(self) -> bool:
        return self.kind in ("partial_participation", "decentralized_time_varying")

    def start(self, rng: np.random.Generator) -> "PatternDrawer":
        return PatternDrawer(self, rng)

    def enumerate(self) -> List[Tuple[float, np.ndarray]]:
        """All (probability, W) pairs of one aggregation step."""
        if self.kind == "full_average":
            return [(1.0, full_average(self.N))]
        if self.kind.startswith("decentralized"):
            p = 1.0 / len(self.matrices)
            return [(p, W) for W in self.matrices]
        subsets = list(itertools.combinations(range(self.N), self.participation))
        p = 1.0 / len(subsets) ** 2
        return [(p, client_sampling_matrix(self.N, S, S2)) for S in subsets for S2 in subsets]


class PatternDrawer:
    """Stateful W generator for one run (tracks the selected set)."""

    def __init__(self, pattern: CommPattern, rng: np.random.Generator):
        self.pattern = pattern
        self.rng = rng
        self.selected: Tuple[int, ...] = ()
        if pattern.kind == "partial_participation":
            self.selected = tuple(sorted(int(i) for i in
                                         rng.choice(pattern.N, pattern.participation, replace=False)))
        elif pattern.kind == "full_average":
            self._fixed = full_average(pattern.N)
        elif pattern.kind == "decentralized_fixed":
            self._fixed = pattern.matrices[0]

    def draw(self) -> np.ndarray:
        kind = self.pattern.kind
        if kind in ("full_average", "decentralized_fixed"):
            return self._fixed
        if kind == "decentralized_time_varying":
            return self.pattern.matrices[int(self.rng.integers(len(self.pattern.matrices)))]
        W, self.selected = draw_client_sampling_matrix(self.pattern.N, self.pattern.participation,
                                                       self.selected, self.rng)
        return W


@dataclass(frozen=True)
class ContractionReport:
    value: float
    contracting: bool
    draws: int


def contraction_exact(pattern: CommPattern) -> float:
    """``|| E[W^T W] - J ||`` by enumerating every W the pattern can emit."""
    E = sum(p * (W.T @ W) for p, W in pattern.enumerate())
    return float(np.linalg.norm(E - full_average(pattern.N), 2))


def verify_contraction(pattern: CommPattern, draws: int = 1, seed: int = 0) -> ContractionReport:
    """Spectral norm of the empirical mean of ``W^T W`` minus ``J``."""
    if draws < 1:
        raise CommunicationError("draws must be >= 1")
    drawer = pattern.start(np.random.default_rng(seed))
    if not pattern.is_random:
        draws = 1
    acc = np.zeros((pattern.N, pattern.N))
    for _ in range(draws):
        W = drawer.draw()
        acc += W.T @ W
    value = float(np.linalg.norm(acc / draws - full_average(pattern.N), 2))
    return ContractionReport(value, value < 1.0 - 1e-12, draws)


@dataclass(frozen=True)
class IntervalSchedule:
    kind: str = "constant"
    K: int = 1

    def __post_init__(self):
        if self.kind not in INTERVAL_KINDS:
            raise ScheduleConfigError(f"unknown interval kind {self.kind!r}")
        if self.kind == "constant" and (int(self.K) != self.K or self.K < 1):
            raise ScheduleConfigError("K must be a positive integer")

    @property
    def growing(self) -> bool:
        return self.kind != "constant"

    def interval(self, l: int) -> int:
        """``K_l`` for ``l >= 1``."""
        if self.kind == "constant":
            return int(self.K)
        if self.kind == "log_growth":
            return max(1, math.ceil(math.log(l)))
        if l < 3:
            return 1
        return max(1, math.ceil(math.log(math.log(l))))


@dataclass(frozen=True)
class AggregationTimes:
    times: np.ndarray        # n_1 < n_2 < ... <= horizon
    intervals: np.ndarray    # K_1, K_2, ...

    def tau(self, n: int) -> int:
        """Index ``l`` (1-based) of the first aggregation time ``n_l >= n``."""
        return int(np.searchsorted(self.times, n, side="left")) + 1


def aggregation_times(schedule: IntervalSchedule, horizon: int) -> AggregationTimes:
    if horizon < 1:
        raise CommunicationError("horizon must be >= 1")
    times, Ks = [], []
    n, l = 0, 1
    while True:
        K = schedule.interval(l)
        if n + K > horizon:
            break
        n += K
        times.append(n)
        Ks.append(K)
        l += 1
    return AggregationTimes(np.array(times, dtype=np.int64), np.array(Ks, dtype=np.int64))


@dataclass(frozen=True)
class StepSchedule:
    gamma_star: float = 1.0
    a: float = 1.0

    def __post_init__(self):
        if not self.gamma_star > 0:
            raise ScheduleConfigError("gamma_star must be positive")
        if not 0.5 < self.a <= 1.0:
            raise ScheduleConfigError("a must lie in (0.5, 1]")


def step_size(s: StepSchedule, n):
    """``gamma_star / (n + 1)^a``; accepts scalars or arrays."""
    out = s.gamma_star / (np.asarray(n, dtype=float) + 1.0) ** s.a
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ScheduleReport:
    n: np.ndarray
    eta: np.ndarray
    eta_sq_partial_sums: np.ndarray
    ratio_l: np.ndarray
    ratio: np.ndarray
    tail_ratio: float
    tail_increment_fraction: float
    sum_converging: bool
    ratio_near_one: bool


def schedule_diagnostics(step: StepSchedule, interval: IntervalSchedule, horizon: int,
                         L: float = 1.0) -> ScheduleReport:
    """Finite-horizon check of the growing-interval conditions.

    Reports ``eta_n = gamma_n K_{tau_n}^{L+1}``, partial sums of ``eta_n^2``
    and the ratios ``eta_{n_l+1} / eta_{n_{l+1}+1}``.
    """
    if interval.growing and step.a != 1.0:
        raise ScheduleConfigError(
            f"growing communication interval requires a = 1 (got a = {step.a})")
    agg = aggregation_times(interval, horizon)
    n = np.arange(1, horizon + 1)
    l_idx = np.searchsorted(agg.times, n, side="left")
    K_tau = np.array([interval.interval(int(l) + 1) for l in range(int(l_idx.max()) + 1)])[l_idx]
    eta = step_size(step, n) * K_tau.astype(float) ** (L + 1)
    sums = np.cumsum(eta ** 2)

    def eta_at(m):
        l = int(np.searchsorted(agg.times, m, side="left")) + 1
        return step_size(step, m) * float(interval.interval(l)) ** (L + 1)

    ratios = np.array([eta_at(int(agg.times[j]) + 1) / eta_at(int(agg.times[j + 1]) + 1)
                       for j in range(len(agg.times) - 1)])
    tail_ratio = float(ratios[-1]) if len(ratios) else float("nan")
    half = sums[len(sums) // 2 - 1] if len(sums) > 1 else 0.0
    frac = float((sums[-1] - half) / sums[-1])
    return ScheduleReport(
        n=n, eta=eta, eta_sq_partial_sums=sums,
        ratio_l=np.arange(1, len(ratios) + 1), ratio=ratios,
        tail_ratio=tail_ratio, tail_increment_fraction=frac,
        sum_converging=frac < 0.05,
        ratio_near_one=bool(np.isfinite(tail_ratio) and abs(tail_ratio - 1) < 0.1),
    )
