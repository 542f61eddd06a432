"""The UD-SGD loop.

Iteration ``n`` (``n = 0 .. horizon-1``) maps ``theta_n`` to ``theta_{n+1}``:
every agent takes one reweighted local gradient step with ``gamma_{n+1}`` on
its current sample ``X_n^i``; if ``n`` is an aggregation time ``n_l`` the
stacked parameters are then mixed with ``W_n``.

Random streams are keyed by ``SeedSequence(seed, spawn_key=...)``:
``(trial, 0, i)`` for agent ``i``'s sampler and ``(trial, 1)`` for the
communication pattern. Datasets, graphs and ``theta*`` belong to the config
and are shared by all trials.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .communication import (CommPattern, IntervalSchedule, ScheduleConfigError, StepSchedule,
                            aggregation_times, is_doubly_stochastic, step_size)
from .problems import Optimum, Problem, solve_optimum
from .sampling import Sampler, SamplerSpec, make_sampler, weights

DIVERGENCE_LIMIT = 1e12
MAX_CHUNK = 1 << 15


class EngineError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    problem: Problem
    samplers: Tuple[SamplerSpec, ...]
    pattern: CommPattern
    schedule: IntervalSchedule
    step: StepSchedule
    horizon: int
    checkpoints: Tuple[int, ...]
    seed: int
    theta0: Optional[np.ndarray] = field(default=None, compare=False)
    optimum: Optional[Optimum] = field(default=None, compare=False)

    def __post_init__(self):
        N = self.problem.N
        if len(self.samplers) != N:
            raise EngineError(f"{len(self.samplers)} samplers for {N} agents")
        if self.pattern.N != N:
            raise EngineError(f"pattern built for {self.pattern.N} agents, problem has {N}")
        for i, spec in enumerate(self.samplers):
            size = self.problem.local_size(i)
            if size < 1:
                raise EngineError(f"agent {i} has no data")
            if spec.is_walk and spec.graph.num_nodes != size:
                raise EngineError(f"agent {i}: graph has {spec.graph.num_nodes} nodes, "
                                  f"dataset has {size} points")
        if self.schedule.growing and self.step.a != 1.0:
            raise ScheduleConfigError("growing communication interval requires a = 1")
        if self.horizon < 1:
            raise EngineError("horizon must be >= 1")
        cps = list(self.checkpoints)
        if not cps or cps != sorted(set(cps)) or cps[0] < 1 or cps[-1] > self.horizon:
            raise EngineError("checkpoints must be strictly increasing within [1, horizon]")

    @property
    def N(self) -> int:
        return self.problem.N


def log_checkpoints(horizon: int, count: int = 20) -> Tuple[int, ...]:
    pts = np.unique(np.round(np.geomspace(1, horizon, count)).astype(int))
    return tuple(int(p) for p in pts[pts >= 1]) if pts[-1] == horizon else \
        tuple(int(p) for p in np.append(pts, horizon))


@dataclass(frozen=True)
class System:
    """Arrays shared by all trials of a config."""

    config: RunConfig
    theta_star: np.ndarray
    global_index: Tuple[np.ndarray, ...]
    local_weights: Tuple[np.ndarray, ...]
    agg_mask: np.ndarray
    kind: int
    data: np.ndarray
    labels: np.ndarray
    A: np.ndarray


def prepare(config: RunConfig) -> System:
    p = config.problem
    opt = config.optimum if config.optimum is not None else solve_optimum(p)
    gidx = tuple(np.asarray(ix, dtype=np.int64) for ix in p.partition.agent_indices)
    wts = tuple(weights(spec, p.local_size(i)) for i, spec in enumerate(config.samplers))
    mask = np.zeros(config.horizon, dtype=bool)
    times = aggregation_times(config.schedule, config.horizon).times
    mask[times[times < config.horizon]] = True
    d = p.d
    labels = p.labels if p.labels is not None else np.zeros(len(p.data))
    A = p.A if p.A is not None else np.zeros((d, d))
    return System(config, np.asarray(opt.theta, float), gidx, wts, mask,
                  0 if p.kind == "quadratic" else 1,
                  np.ascontiguousarray(p.data, dtype=float),
                  np.ascontiguousarray(labels, dtype=float), np.ascontiguousarray(A, dtype=float))


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


@dataclass
class Trajectory:
    trial: int
    n: np.ndarray
    theta: np.ndarray
    mse: np.ndarray
    consensus: np.ndarray
    pr_mse: np.ndarray
    gamma: np.ndarray
    final_Theta: np.ndarray


@dataclass
class Agent:
    index: int
    theta: np.ndarray
    sampler: Sampler
    problem: Problem
    weights: np.ndarray


def local_step(agent: Agent, gamma: float) -> np.ndarray:
    """Draw one sample and apply one reweighted gradient step in place."""
    x = agent.sampler.next()
    g = agent.problem.grad(agent.index, agent.theta, x) * agent.weights[x]
    new = agent.theta - gamma * g
    if not np.all(np.abs(new) <= DIVERGENCE_LIMIT):
        raise DivergenceError(f"agent {agent.index}: parameter left the bounded region")
    agent.theta = new
    return new


def aggregate(Theta, W) -> np.ndarray:
    """Mix stacked parameters: row ``i`` becomes ``sum_j W[i, j] Theta[j]``."""
    Theta = np.asarray(Theta, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.shape != (Theta.shape[0], Theta.shape[0]):
        raise EngineError(f"W of shape {W.shape} does not match {Theta.shape[0]} agents")
    if not is_doubly_stochastic(W):
        raise EngineError("W is not doubly stochastic")
    return W @ Theta


def consensus_error(Theta) -> float:
    Theta = np.asarray(Theta)
    return float(np.linalg.norm(Theta - Theta.mean(axis=0)))


def run(config: RunConfig, trial: int = 0, system: Optional[System] = None) -> Trajectory:
    """Execute one trial; deterministic in ``(config, trial)``."""
    sysm = system if system is not None else prepare(config)
    p = config.problem
    N, d = p.N, p.d
    theta0 = np.zeros(d) if config.theta0 is None else np.asarray(config.theta0, float)
    Theta = np.ascontiguousarray(np.tile(theta0, (N, 1)))
    samplers = [make_sampler(spec, p.local_size(i), stream(config.seed, trial, 0, i))
                for i, spec in enumerate(config.samplers)]
    drawer = config.pattern.start(stream(config.seed, trial, 1))
    fixed_stack = None if config.pattern.is_random else drawer.draw()[None].copy()
    pr_sum = np.zeros(d)
    ts = sysm.theta_star
    K = len(config.checkpoints)
    rec = dict(theta=np.zeros((K, d)), mse=np.zeros(K), consensus=np.zeros(K),
               pr_mse=np.zeros(K))
    n = 0
    for k, cp in enumerate(config.checkpoints):
        while n < cp:
            T = min(cp - n, MAX_CHUNK)
            idx = np.empty((N, T), dtype=np.int64)
            wts = np.empty((N, T))
            for i, s in enumerate(samplers):
                loc = s.draw(T)
                idx[i] = sysm.global_index[i][loc]
                wts[i] = sysm.local_weights[i][loc]
            gammas = step_size(config.step, np.arange(n + 1, n + T + 1))
            slots = np.full(T, -1, dtype=np.int64)
            hits = np.flatnonzero(sysm.agg_mask[n:n + T])
            if fixed_stack is not None:
                W_stack = fixed_stack
                slots[hits] = 0
            else:
                W_stack = np.array([drawer.draw() for _ in hits]).reshape(len(hits), N, N)
                slots[hits] = np.arange(len(hits))
                if not len(hits):
                    W_stack = np.zeros((1, N, N))
            bad = _kernels.sgd_chunk(Theta, idx, wts, gammas, slots, W_stack, sysm.kind,
                                     sysm.data, sysm.labels, sysm.A, float(p.kappa), pr_sum,
                                     DIVERGENCE_LIMIT)
            if bad >= 0:
                raise DivergenceError(
                    f"trial {trial}: |theta| exceeded {DIVERGENCE_LIMIT:.0e} at iteration {n + bad} "
                    f"(gamma = {gammas[bad]:.3e}); the run left every bounded set")
            n += T
        avg = Theta.mean(axis=0)
        rec["theta"][k] = avg
        rec["mse"][k] = float(np.sum((avg - ts) ** 2))
        rec["consensus"][k] = consensus_error(Theta)
        rec["pr_mse"][k] = float(np.sum((pr_sum / n - ts) ** 2))
    ns = np.array(config.checkpoints, dtype=np.int64)
    return Trajectory(trial, ns, rec["theta"], rec["mse"], rec["consensus"], rec["pr_mse"],
                      step_size(config.step, ns), Theta.copy())


@dataclass
class EnsembleStats:
    n: np.ndarray
    gamma: np.ndarray
    mse_mean: np.ndarray
    mse_se: np.ndarray
    mse_var: np.ndarray
    pr_mse_mean: np.ndarray
    pr_mse_se: np.ndarray
    consensus_mean: np.ndarray
    consensus_se: np.ndarray
    C: np.ndarray            # (K, d, d) scaled covariance (1/gamma_n) Cov(theta_n - theta*)
    trace_C: np.ndarray
    trace_C_se: np.ndarray
    trials: int
    trajectories: List[Trajectory] = field(default_factory=list, repr=False)

    @property
    def scaled_mse(self) -> np.ndarray:
        return self.mse_mean / self.gamma


def _se(x, axis=0):
    return x.std(axis=axis, ddof=1) / np.sqrt(x.shape[axis])


def summarize(trajs: Sequence[Trajectory], theta_star) -> EnsembleStats:
    R = len(trajs)
    if R < 2:
        raise EngineError("ensemble statistics need at least 2 trials")
    mse = np.array([t.mse for t in trajs])
    pr = np.array([t.pr_mse for t in trajs])
    cons = np.array([t.consensus for t in trajs])
    th = np.array([t.theta for t in trajs]) - theta_star      # (R, K, d)
    gamma = trajs[0].gamma
    dev = th - th.mean(axis=0)
    C = np.einsum("rki,rkj->kij", dev, dev) / (R - 1) / gamma[:, None, None]
    sq = np.sum(dev ** 2, axis=2) * R / (R - 1)               # unbiased per-trial trace terms
    return EnsembleStats(
        n=trajs[0].n, gamma=gamma,
        mse_mean=mse.mean(axis=0), mse_se=_se(mse), mse_var=mse.var(axis=0, ddof=1),
        pr_mse_mean=pr.mean(axis=0), pr_mse_se=_se(pr),
        consensus_mean=cons.mean(axis=0), consensus_se=_se(cons),
        C=C, trace_C=np.trace(C, axis1=1, axis2=2), trace_C_se=_se(sq) / gamma,
        trials=R, trajectories=list(trajs),
    )


def run_trials(config: RunConfig, trials: int, threads: int = 1,
               trial_offset: int = 0) -> List[Trajectory]:
    sysm = prepare(config)
    ids = range(trial_offset, trial_offset + trials)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(lambda r: run(config, r, sysm), ids))
    return [run(config, r, sysm) for r in ids]


def run_ensemble(config: RunConfig, trials: int, threads: int = 1) -> EnsembleStats:
    """Run ``trials`` independent trials (results independent of ``threads``)."""
    if trials < 2:
        raise EngineError("need at least 2 trials")
    sysm = prepare(config)
    return summarize(run_trials(config, trials, threads), sysm.theta_star)


def _fmt(x) -> str:
    return repr(float(x))


def write_csv(path_or_buf, header: Sequence[str], rows, comment: str) -> None:
    """CSV with a leading ``# comment`` line then the header row."""
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    text = buf.getvalue()
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w", newline="") as fh:
            fh.write(text)


TRAJECTORY_COLUMNS = ("trial", "n", "mse", "pr_mse", "consensus", "gamma")


def trajectory_rows(trajs: Sequence[Trajectory]):
    for t in trajs:
        for k in range(len(t.n)):
            yield (t.trial, int(t.n[k]), float(t.mse[k]), float(t.pr_mse[k]),
                   float(t.consensus[k]), float(t.gamma[k]))


ENSEMBLE_COLUMNS = ("n", "gamma", "mse_mean", "mse_se", "pr_mse_mean", "pr_mse_se",
                    "consensus_mean", "consensus_se", "trace_C", "trace_C_se")


def ensemble_rows(s: EnsembleStats):
    for k in range(len(s.n)):
        yield (int(s.n[k]), float(s.gamma[k]), float(s.mse_mean[k]), float(s.mse_se[k]),
               float(s.pr_mse_mean[k]), float(s.pr_mse_se[k]), float(s.consensus_mean[k]),
               float(s.consensus_se[k]), float(s.trace_C[k]), float(s.trace_C_se[k]))


def matrix_block_rows(matrices: dict):
    for name, M in matrices.items():
        M = np.atleast_2d(M)
        for r in range(M.shape[0]):
            yield (name, r, *[float(v) for v in M[r]])
