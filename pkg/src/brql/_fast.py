"""Compiled loops for the sampled Bellman sweep and the full stage loop.

Both consume the generator exactly like the numpy path in
``risk.sweep_targets`` (pair by pair, sample by sample, successor by
successor), so compiled and reference runs agree from the same seed.
"""

import math

import numpy as np
from numba import njit

VAR, CVAR, MEAN = 0, 1, 2


@njit(cache=True)
def sampled_targets(gen, counts, sizes, w, kind, alpha):
    P, S = counts.shape
    out = np.empty(P)
    for p in range(P):
        n = sizes[p]
        x = np.empty(n)
        for i in range(n):
            tot = 0.0
            acc = 0.0
            for j in range(S):
                g = gen.standard_gamma(counts[p, j])
                tot += g
                acc += g * w[p, j]
            x[i] = acc / tot
        x.sort()
        k = min(max(math.ceil(round(n * alpha, 9)), 1), n)
        if kind == VAR:
            out[p] = x[k - 1]
        else:
            out[p] = x[:k].sum() / k
    return out


@njit(cache=True)
def _state_values(q, adm):
    S, A = q.shape
    v = np.empty(S)
    for s in range(S):
        best = -np.inf
        for a in range(A):
            if adm[s, a] and q[s, a] > best:
                best = q[s, a]
        v[s] = best
    return v


@njit(cache=True)
def run_stages(gen, q, counts, sizes, adm, ps, pa, pair_reward, gamma, kind, alpha,
               n_min, cap, obs, stage_n, stage_m, rates):
    """Mutates ``q``, ``counts`` and ``sizes`` in place; returns per-stage history.

    ``cap < 0`` means no sample-size cap.  History rows are stage 0..T.
    """
    S, A = q.shape
    P = ps.size
    T = stage_n.size
    q_hist = np.empty((T + 1, S, A))
    size_hist = np.empty((T + 1, 2), np.int64)
    q_hist[0] = q
    pc = np.empty((P, S))
    n = np.empty(P, np.int64)
    w = np.empty((P, S))
    lo, hi = 1 << 62, 0
    for p in range(P):
        lo = min(lo, sizes[ps[p], pa[p]])
        hi = max(hi, sizes[ps[p], pa[p]])
    size_hist[0, 0], size_hist[0, 1] = lo, hi
    pos = 0
    step = 0
    for t in range(T):
        for i in range(stage_n[t]):
            s, a, sn = obs[pos, 0], obs[pos, 1], obs[pos, 2]
            pos += 1
            old = sizes[s, a]
            for p in range(P):
                v = sizes[ps[p], pa[p]] + 1
                if cap >= 0 and v > cap:
                    v = cap
                sizes[ps[p], pa[p]] = v
            sizes[s, a] = max(old - 1, n_min)
            counts[s, a, sn] += 1.0
        for _ in range(stage_m[t]):
            lam = rates[step]
            v = _state_values(q, adm)
            for p in range(P):
                for j in range(S):
                    w[p, j] = pair_reward[p, j] + gamma * v[j]
            if kind == MEAN:
                targets = np.empty(P)
                for p in range(P):
                    tot = 0.0
                    acc = 0.0
                    for j in range(S):
                        c = counts[ps[p], pa[p], j]
                        tot += c
                        acc += c * w[p, j]
                    targets[p] = acc / tot
            else:
                for p in range(P):
                    n[p] = sizes[ps[p], pa[p]]
                    for j in range(S):
                        pc[p, j] = counts[ps[p], pa[p], j]
                targets = sampled_targets(gen, pc, n, w, kind, alpha)
            for p in range(P):
                q[ps[p], pa[p]] = (1.0 - lam) * q[ps[p], pa[p]] + lam * targets[p]
            step += 1
        q_hist[t + 1] = q
        lo, hi = 1 << 62, 0
        for p in range(P):
            lo = min(lo, sizes[ps[p], pa[p]])
            hi = max(hi, sizes[ps[p], pa[p]])
        size_hist[t + 1, 0], size_hist[t + 1, 1] = lo, hi
    return q_hist, size_hist
