"""Compiled inner loops.

Every kernel consumes pre-generated uniforms so that the random stream of a
sampler (and hence every trajectory) is independent of how the horizon is
split into chunks and of how many worker threads run trials.
"""

import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def chain_block(cum_P, cur, u, out):
    """Advance a finite chain with row-cumulative kernel ``cum_P``; emit the
    new state for each uniform. Returns the final state."""
    n_states = cum_P.shape[0]
    for t in range(u.shape[0]):
        row = cum_P[cur]
        r = u[t] * row[n_states - 1]
        nxt = n_states - 1
        for j in range(n_states):
            if r < row[j]:
                nxt = j
                break
        cur = nxt
        out[t] = cur
    return cur


@njit(**_JIT)
def srw_block(indptr, indices, cur, u, out):
    for t in range(u.shape[0]):
        lo = indptr[cur]
        deg = indptr[cur + 1] - lo
        k = int(u[t] * deg)
        if k >= deg:
            k = deg - 1
        cur = indices[lo + k]
        out[t] = cur
    return cur


@njit(**_JIT)
def nbrw_block(indptr, indices, cur, prev, u, out):
    """Non-backtracking walk; ``prev < 0`` means no history (plain SRW step).
    At a degree-1 node the only move is back to ``prev``."""
    for t in range(u.shape[0]):
        lo = indptr[cur]
        deg = indptr[cur + 1] - lo
        if prev < 0:
            k = int(u[t] * deg)
            if k >= deg:
                k = deg - 1
            nxt = indices[lo + k]
        elif deg == 1:
            nxt = indices[lo]
        else:
            k = int(u[t] * (deg - 1))
            if k >= deg - 1:
                k = deg - 2
            # k-th neighbour skipping prev
            nxt = -1
            seen = 0
            for j in range(deg):
                v = indices[lo + j]
                if v == prev:
                    continue
                if seen == k:
                    nxt = v
                    break
                seen += 1
        prev = cur
        cur = nxt
        out[t] = cur
    return cur, prev


@njit(**_JIT)
def srrw_block(indptr, indices, log_mu, alpha, b, x, cur, step, u, out):
    """Self-repellent walk over an SRW baseline.

    Moves with probability proportional to ``P_ij (x_j / mu_j)^(-alpha)``
    (``P_ij`` is constant over the neighbours of ``i`` and cancels), then
    updates the empirical measure ``x <- x + beta (delta_X - x)`` with
    ``beta = (step + 1)^(-b)`` after incrementing ``step``.
    """
    n = x.shape[0]
    logw = np.empty(n)
    for t in range(u.shape[0]):
        lo = indptr[cur]
        deg = indptr[cur + 1] - lo
        mx = -np.inf
        for j in range(deg):
            v = indices[lo + j]
            lw = -alpha * (math.log(x[v]) - log_mu[v])
            logw[j] = lw
            if lw > mx:
                mx = lw
        total = 0.0
        for j in range(deg):
            logw[j] = math.exp(logw[j] - mx)
            total += logw[j]
        r = u[t] * total
        nxt = indices[lo + deg - 1]
        acc = 0.0
        for j in range(deg):
            acc += logw[j]
            if r < acc:
                nxt = indices[lo + j]
                break
        cur = nxt
        step += 1
        beta = (step + 1.0) ** (-b)
        for j in range(n):
            x[j] *= 1.0 - beta
        x[cur] += beta
        out[t] = cur
    return cur, step


@njit(**_JIT)
def _sigmoid(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(**_JIT)
def sgd_chunk(theta, idx, wts, gammas, agg_slot, W_stack, kind, data, labels, A,
              kappa, pr_sum, limit):
    """Run ``idx.shape[1]`` UD-SGD iterations in place on ``theta`` (N x d).

    Iteration ``t``: add the agent average to ``pr_sum``, apply one weighted
    local gradient step per agent, then mix with ``W_stack[agg_slot[t]]``
    when ``agg_slot[t] >= 0``. ``kind`` 0 is the quadratic loss
    ``0.5 (theta - c)^T A (theta - c)``, 1 the regularised logistic loss.

    Returns -1, or the offset of the iteration at which some |theta| exceeded
    ``limit`` or became non-finite.
    """
    N, d = theta.shape
    T = idx.shape[1]
    g = np.empty(d)
    mixed = np.empty((N, d))
    for t in range(T):
        for k in range(d):
            s = 0.0
            for i in range(N):
                s += theta[i, k]
            pr_sum[k] += s / N
        gam = gammas[t]
        for i in range(N):
            x = idx[i, t]
            c = gam * wts[i, t]
            if kind == 0:
                for r in range(d):
                    acc = 0.0
                    for k in range(d):
                        acc += A[r, k] * (theta[i, k] - data[x, k])
                    g[r] = acc
            else:
                z = 0.0
                for k in range(d):
                    z += theta[i, k] * data[x, k]
                resid = _sigmoid(z) - labels[x]
                for r in range(d):
                    g[r] = data[x, r] * resid + kappa * theta[i, r]
            for r in range(d):
                v = theta[i, r] - c * g[r]
                if not (abs(v) <= limit):
                    return t
                theta[i, r] = v
        slot = agg_slot[t]
        if slot >= 0:
            W = W_stack[slot]
            for i in range(N):
                for r in range(d):
                    acc = 0.0
                    for j in range(N):
                        acc += W[i, j] * theta[j, r]
                    mixed[i, r] = acc
            for i in range(N):
                for r in range(d):
                    theta[i, r] = mixed[i, r]
    return -1
