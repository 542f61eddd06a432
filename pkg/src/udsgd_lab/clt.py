"""Closed-form CLT predictions for UD-SGD and their comparison with
ensemble statistics.

``U_i`` is the asymptotic covariance of agent ``i``'s reweighted gradient at
``theta*`` along its sampling chain, ``U = (1/N^2) sum_i U_i``, and the
limiting covariance ``V`` of ``gamma_n^{-1/2}(theta_n - theta*)`` solves
``M V + V M^T + U = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.linalg import expm, solve_continuous_lyapunov

from . import markov
from .communication import StepSchedule, step_size
from .problems import Optimum, Problem
from .sampling import SamplerSpec, stationary_law, weights

KRONECKER_MAX_DIM = 40


class CLTError(ValueError):
    pass


class HurwitzError(CLTError):
    pass


class KernelUnavailableError(CLTError):
    """The sampler has no fixed finite kernel; use the Monte-Carlo estimator."""


def _check_hurwitz(M):
    ev = np.linalg.eigvals(M)
    worst = ev[np.argmax(ev.real)]
    if worst.real >= 0:
        raise HurwitzError(f"M is not Hurwitz: eigenvalue {worst:.6g} has nonnegative real part")


def drift_matrix(H, step: StepSchedule) -> np.ndarray:
    """``-H`` for ``a < 1``; ``I / (2 gamma_star) - H`` for ``a = 1``."""
    H = np.asarray(H, dtype=float)
    if step.a < 1.0:
        M = -H
    else:
        mu = float(np.linalg.eigvalsh(0.5 * (H + H.T))[0])
        M = np.eye(H.shape[0]) / (2 * step.gamma_star) - H
        if step.gamma_star <= 1.0 / (2 * mu):
            raise HurwitzError(
                f"a = 1 needs gamma_star > 1/(2 mu) = {1 / (2 * mu):.6g}; got gamma_star = "
                f"{step.gamma_star:.6g} (largest eigenvalue of M: {np.linalg.eigvalsh(M)[-1]:.6g})")
    _check_hurwitz(M)
    return M


def lyapunov_solve(M, U) -> np.ndarray:
    """Solve ``M V + V M^T = -U`` for Hurwitz ``M``.

    Uses the Kronecker system ``(I (x) M + M (x) I) vec(V) = -vec(U)`` up to
    ``d = 40`` and Bartels-Stewart (scipy) beyond.
    """
    M = np.asarray(M, dtype=float)
    U = np.asarray(U, dtype=float)
    if M.shape != U.shape or M.shape[0] != M.shape[1]:
        raise CLTError(f"shape mismatch {M.shape} vs {U.shape}")
    _check_hurwitz(M)
    d = M.shape[0]
    if d <= KRONECKER_MAX_DIM:
        I = np.eye(d)
        K = np.kron(I, M) + np.kron(M, I)
        V = np.linalg.solve(K, -U.reshape(-1, order="F")).reshape(d, d, order="F")
    else:
        V = solve_continuous_lyapunov(M, -U)
    V = 0.5 * (V + V.T)
    res = np.linalg.norm(M @ V + V @ M.T + U, 2)
    if res > 1e-9 * max(1.0, np.linalg.norm(U, 2)):
        raise CLTError(f"Lyapunov residual {res:.3e} too large")
    return V


def integral_check(M, U, T: float, dt: float = 1e-4) -> np.ndarray:
    """Composite-trapezoid value of ``int_0^T e^{Mt} U e^{M^T t} dt``.

    The grid has ``2^m`` intervals (``m = ceil(log2(T/dt))``); the node sum is
    accumulated by doubling, ``S <- S + E S E^T``, ``E <- E^2``.
    """
    M = np.asarray(M, dtype=float)
    U = np.asarray(U, dtype=float)
    _check_hurwitz(M)
    m = max(0, math.ceil(math.log2(T / dt)))
    h = T / 2 ** m
    E = expm(M * h)
    S = U.copy()
    for _ in range(m):
        S = S + E @ S @ E.T
        E = E @ E
    last = E @ U @ E.T
    V = h * (S - 0.5 * U + 0.5 * last)
    return 0.5 * (V + V.T)


def pr_covariance(H, U) -> np.ndarray:
    """Polyak-Ruppert covariance ``H^{-1} U H^{-1}``."""
    H = np.asarray(H, dtype=float)
    try:
        X = np.linalg.solve(H, np.asarray(U, dtype=float))
        V = np.linalg.solve(H, X.T).T
    except np.linalg.LinAlgError as exc:
        raise CLTError("H is singular") from exc
    return 0.5 * (V + V.T)


def predicted_mse(V, step: StepSchedule, n):
    return step_size(step, n) * float(np.trace(V))


def system_U(U_list: Sequence[np.ndarray]) -> np.ndarray:
    if not U_list:
        raise CLTError("no agents")
    shapes = {np.shape(U) for U in U_list}
    if len(shapes) != 1:
        raise CLTError(f"dimension mismatch among U_i: {shapes}")
    N = len(U_list)
    return np.sum(U_list, axis=0) / N ** 2


def agent_function_table(problem: Problem, agent: int, spec: SamplerSpec, theta_star) -> np.ndarray:
    """Rows ``w(x) grad F_i(theta*, x)`` over agent ``i``'s local points."""
    size = problem.local_size(agent)
    return weights(spec, size)[:, None] * problem.agent_grads(agent, theta_star)


def agent_U(problem: Problem, agent: int, spec: SamplerSpec, theta_star,
            mc: Optional[dict] = None) -> np.ndarray:
    """Asymptotic covariance of agent ``i``'s reweighted gradient at ``theta*``.

    Closed form for ``iid``, ``srw`` and ``nbrw`` (on its directed-edge chain).
    ``shuffle`` and ``srrw`` need ``mc`` (keyword arguments of
    :func:`markov.asymptotic_covariance_mc`); otherwise
    :class:`KernelUnavailableError` is raised.
    """
    G = agent_function_table(problem, agent, spec, theta_star)
    size = G.shape[0]
    if spec.kind == "iid":
        pi = stationary_law(spec, size)
        return markov.asymptotic_covariance(np.outer(np.ones(size), pi), pi, G)
    if spec.kind == "srw":
        P = markov.validate_ergodic(markov.srw_kernel(spec.graph))
        return markov.asymptotic_covariance(P, markov.stationary(P), G)
    if spec.kind == "nbrw":
        lifted = markov.nbrw_lifted_kernel(spec.graph)
        P = markov.validate_ergodic(lifted.P)
        return markov.asymptotic_covariance(P, markov.stationary(P), lifted.lift(G))
    if mc is None:
        raise KernelUnavailableError(f"{spec.kind} has no finite kernel; pass mc=dict(n=..., trials=..., seed=...)")
    return markov.asymptotic_covariance_mc(spec, G, **mc).cov


@dataclass
class CovarianceReport:
    U_agents: List[np.ndarray]
    U: np.ndarray
    H: np.ndarray
    mu: float
    M: np.ndarray
    V: np.ndarray
    V_prime: np.ndarray
    step: StepSchedule
    theta_star: np.ndarray
    notes: Dict[str, str] = field(default_factory=dict)

    @property
    def trace_V(self) -> float:
        return float(np.trace(self.V))

    @property
    def trace_V_prime(self) -> float:
        return float(np.trace(self.V_prime))

    def predicted_mse(self, n):
        return step_size(self.step, n) * self.trace_V

    def matrices(self) -> Dict[str, np.ndarray]:
        out = {f"U_{i}": U for i, U in enumerate(self.U_agents)}
        out.update(U=self.U, H=self.H, M=self.M, V=self.V, V_prime=self.V_prime)
        return out


def covariance_report(problem: Problem, samplers: Sequence[SamplerSpec], step: StepSchedule,
                      optimum: Optimum, mc: Optional[dict] = None) -> CovarianceReport:
    if len(samplers) != problem.N:
        raise CLTError("one sampler per agent required")
    U_agents = []
    notes = {}
    for i, spec in enumerate(samplers):
        mc_i = None if mc is None else dict(mc, seed=int(mc.get("seed", 0)) * 1000003 + i)
        U_agents.append(agent_U(problem, i, spec, optimum.theta, mc=mc_i))
        if spec.kind in ("shuffle", "srrw"):
            notes[f"U_{i}"] = "monte-carlo"
    U = system_U(U_agents)
    M = drift_matrix(optimum.H, step)
    V = lyapunov_solve(M, U)
    return CovarianceReport(U_agents, U, optimum.H, optimum.mu, M, V,
                            pr_covariance(optimum.H, U), step, optimum.theta, notes)


def compare(report: CovarianceReport, stats, variants: Optional[Dict[str, CovarianceReport]] = None,
            tol: float = 1e-8) -> dict:
    """Predicted vs empirical covariance, per checkpoint and at the final one.

    ``stats`` is an :class:`udsgd_lab.engine.EnsembleStats`. ``variants`` maps
    names to reports of alternative strategies; their ``V`` is Loewner-compared
    with ``report.V``.
    """
    rows = []
    for k, n in enumerate(stats.n):
        emp = float(stats.trace_C[k])
        rows.append(dict(
            n=int(n), gamma=float(stats.gamma[k]),
            predicted_trace=report.trace_V, empirical_trace=emp,
            empirical_trace_se=float(stats.trace_C_se[k]),
            rel_error=(emp - report.trace_V) / report.trace_V if report.trace_V else float("nan"),
            predicted_mse=report.predicted_mse(n), empirical_mse=float(stats.mse_mean[k]),
            empirical_mse_se=float(stats.mse_se[k]),
        ))
    final = stats.C[-1]
    verdicts = {}
    for name, other in (variants or {}).items():
        verdicts[name] = markov.loewner_compare(report.V, other.V, tol)
    return dict(rows=rows, final_V=report.V, final_C=final,
                entry_diff=final - report.V, loewner=verdicts)
