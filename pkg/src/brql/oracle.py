"""Ground-truth fixed points of the posterior risk Bellman operator.

The operator is made deterministic by sample-average approximation: one set
of ``n_big`` kernel draws per pair is frozen, and the risk estimate over
those draws is iterated to its fixed point.  Pairs treated as fully observed
use the true kernel directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mdp import ConvergenceError, MdpModel, state_values
from .posterior import DirichletPosterior, as_batch, init_uniform_prior
from .risk import RiskFunctional, order_index

DEFAULT_N_BIG = 20000
DEFAULT_REL_TOL = 1e-6
CHUNK_BYTES = 64 * 2**20


@dataclass
class LimitingPosteriorSpec:
    """Per-pair choice between the true kernel (``dirac``) and a frozen Dirichlet."""

    dirac: np.ndarray
    counts: np.ndarray

    @classmethod
    def from_posterior(cls, posterior: DirichletPosterior, dirac=None) -> "LimitingPosteriorSpec":
        mask = np.zeros(posterior.admissible.shape, bool) if dirac is None else np.asarray(dirac, bool)
        return cls(mask & posterior.admissible, posterior.counts.copy())

    @classmethod
    def all_dirac(cls, model: MdpModel) -> "LimitingPosteriorSpec":
        S, A = model.num_states, model.num_actions
        return cls(model.admissible.copy(), np.ones((S, A, S)))


class SaaOperator:
    """Frozen-sample risk Bellman operator ``Q -> ρ̂(f(p_i | s, a, Q))``.

    For the mean functional only the average of the draws is kept, which
    gives the same operator at a fraction of the memory; ``exact_mean``
    swaps that average for the closed-form posterior mean.
    """

    def __init__(self, spec: LimitingPosteriorSpec | DirichletPosterior, risk: RiskFunctional,
                 model: MdpModel, n_big: int = DEFAULT_N_BIG, rng: np.random.Generator | None = None,
                 exact_mean: bool = False):
        if n_big < 1:
            raise ValueError("n_big must be at least 1")
        if isinstance(spec, DirichletPosterior):
            spec = LimitingPosteriorSpec.from_posterior(spec)
        self.model, self.risk, self.n_big = model, risk, n_big
        rng = np.random.default_rng() if rng is None else rng
        states, actions = model.pairs()
        dirac = spec.dirac[states, actions]
        self.dirac_idx = np.flatnonzero(dirac)
        self.sample_idx = np.flatnonzero(~dirac)
        self.dirac_kernel = model.transitions[states[self.dirac_idx], actions[self.dirac_idx]]
        counts = spec.counts[states[self.sample_idx], actions[self.sample_idx]]
        S = model.num_states
        # draws go pair by pair in chunks so huge models never hold more than needed
        self.kernels = None
        self.mean_kernel = np.zeros((self.sample_idx.size, S))
        keep = risk.kind != "mean"
        if keep:
            self.kernels = np.empty((self.sample_idx.size, n_big, S))
        per_pair = max(1, CHUNK_BYTES // (8 * n_big * S))
        pending = 0 if exact_mean and not keep else self.sample_idx.size
        for lo in range(0, pending, per_pair):
            c = counts[lo:lo + per_pair]
            g = rng.standard_gamma(np.broadcast_to(c[:, None, :], (c.shape[0], n_big, S)))
            g /= g.sum(axis=2, keepdims=True)
            self.mean_kernel[lo:lo + per_pair] = g.mean(axis=1)
            if keep:
                self.kernels[lo:lo + per_pair] = g
        pr = model.pair_reward
        self.dirac_reward = np.einsum("ij,ij->i", self.dirac_kernel, pr[self.dirac_idx])
        if keep:
            self.sample_reward = np.einsum("pns,ps->pn", self.kernels, pr[self.sample_idx])
            self.k = order_index(n_big, risk.alpha)
        else:
            if exact_mean:
                self.mean_kernel = counts / counts.sum(axis=1, keepdims=True)
            self.sample_reward = np.einsum("ij,ij->i", self.mean_kernel, pr[self.sample_idx])

    def apply(self, q: np.ndarray) -> np.ndarray:
        model = self.model
        v = model.discount * state_values(model, q)
        targets = np.empty(model.pair_reward.shape[0])
        targets[self.dirac_idx] = self.dirac_reward + self.dirac_kernel @ v
        if self.sample_idx.size:
            if self.kernels is None:
                targets[self.sample_idx] = self.sample_reward + self.mean_kernel @ v
            else:
                x = self.sample_reward + self.kernels @ v
                k = self.k
                part = np.partition(x, k - 1, axis=1)
                if self.risk.kind == "var":
                    targets[self.sample_idx] = part[:, k - 1]
                else:
                    targets[self.sample_idx] = part[:, :k].mean(axis=1)
        out = np.zeros(q.shape)
        states, actions = model.pairs()
        out[states, actions] = targets
        return out

    def solve(self, tol: float | None = None, max_iter: int = 10**6, q0: np.ndarray | None = None) -> np.ndarray:
        """Iterate from ``q0`` (zero by default) until the residual is at most ``tol``."""
        model = self.model
        if tol is None:
            tol = DEFAULT_REL_TOL * model.value_bound
        if tol <= 0:
            raise ValueError("tol must be positive")
        stop = tol * (1.0 - model.discount) / model.discount
        q = np.zeros((model.num_states, model.num_actions)) if q0 is None else np.array(q0, float)
        for _ in range(max_iter):
            new = self.apply(q)
            change = np.abs(new - q).max()
            q = new
            if change <= stop:
                return q
        raise ConvergenceError(f"fixed-point iteration did not converge in {max_iter} sweeps")


def brmdp_fixed_point(spec: LimitingPosteriorSpec | DirichletPosterior, risk: RiskFunctional,
                      model: MdpModel, n_big: int = DEFAULT_N_BIG, tol: float | None = None,
                      rng: np.random.Generator | None = None, max_iter: int = 10**6,
                      exact_mean: bool = False) -> np.ndarray:
    return SaaOperator(spec, risk, model, n_big, rng, exact_mean).solve(tol, max_iter)


def data_conditional_optimal(observations, model: MdpModel, risk: RiskFunctional,
                             covered, prior: DirichletPosterior | None = None,
                             n_big: int = DEFAULT_N_BIG, tol: float | None = None,
                             rng: np.random.Generator | None = None,
                             exact_mean: bool = False) -> np.ndarray:
    """Fixed point under the limiting posterior implied by an observation record.

    ``covered`` marks pairs treated as observed infinitely often (true kernel);
    the rest keep ``Dirichlet(prior + counts)``.
    """
    posterior = (init_uniform_prior(model) if prior is None else prior).update(as_batch(observations))
    spec = LimitingPosteriorSpec.from_posterior(posterior, covered)
    return brmdp_fixed_point(spec, risk, model, n_big, tol, rng, exact_mean=exact_mean)


def posterior_gap_bound(o_min: int, num_states: int, alpha: float, r_bar: float,
                        gamma: float) -> tuple[float, float]:
    """Finite-data gap between the posterior-risk and true optimal values.

    With at least ``o_min`` observations at every pair and a unit Dirichlet
    prior, ``||V^φ - V^c||∞ <= o_min^(-1/3) sqrt(|S|/α) 5|S|R̄/(1-γ)²`` with
    probability at least ``1 - o_min^(-1/3) sqrt(|S|/α)``.  Returns
    ``(probability_floor, bound)``; a non-positive floor means the statement
    is vacuous at this sample size.
    """
    if o_min < 1:
        raise ValueError("o_min must be at least 1")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    scale = o_min ** (-1.0 / 3.0) * math.sqrt(num_states / alpha)
    return 1.0 - scale, scale * 5.0 * num_states * r_bar / (1.0 - gamma) ** 2
