"""Finite MDPs, the coin-toss and inventory benchmarks, and exact solvers.

Q tables are ``(S, A)`` float arrays.  Per-state admissible action sets are
handled by an ``(S, A)`` boolean mask on the model; entries of a Q table at
inadmissible pairs are kept at zero and ignored by every max/argmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ROW_SUM_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """Raised when a fixed-point iteration hits its sweep cap."""


@dataclass(frozen=True, eq=False)
class MdpModel:
    """Tabular MDP with known rewards ``r(s,a,s')`` and true kernel ``p(s'|s,a)``."""

    reward: np.ndarray
    transitions: np.ndarray
    discount: float
    admissible: np.ndarray | None = None
    state_labels: np.ndarray | None = None
    action_labels: np.ndarray | None = None
    name: str = "mdp"
    reward_bound: float = field(init=False)
    _pairs: tuple = field(init=False, repr=False)
    pair_reward: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        reward = np.asarray(self.reward, dtype=float)
        trans = np.asarray(self.transitions, dtype=float)
        if reward.ndim != 3 or reward.shape != trans.shape or reward.shape[0] != reward.shape[2]:
            raise ValueError(f"reward/transitions must both be (S, A, S); got {reward.shape} and {trans.shape}")
        S, A, _ = reward.shape
        adm = np.ones((S, A), bool) if self.admissible is None else np.asarray(self.admissible, bool)
        if adm.shape != (S, A):
            raise ValueError(f"admissible mask must be {(S, A)}, got {adm.shape}")
        if not adm.any(axis=1).all():
            raise ValueError("every state needs at least one admissible action")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        rows = trans[adm]
        if (rows < 0).any() or np.abs(rows.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
            raise ValueError("each admissible transition row must be a probability vector")
        for name, arr in (("reward", reward), ("transitions", trans), ("admissible", adm)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "reward_bound", float(np.abs(reward[adm]).max()))
        object.__setattr__(self, "_pairs", np.nonzero(adm))
        object.__setattr__(self, "pair_reward", reward[adm])
        labels = np.arange(S) if self.state_labels is None else np.asarray(self.state_labels)
        object.__setattr__(self, "state_labels", labels)
        alabels = np.arange(A) if self.action_labels is None else np.asarray(self.action_labels)
        object.__setattr__(self, "action_labels", alabels)

    @property
    def num_states(self) -> int:
        return self.reward.shape[0]

    @property
    def num_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def value_bound(self) -> float:
        """``R̄ / (1 - γ)``, the sup-norm bound on any value or Q function."""
        return self.reward_bound / (1.0 - self.discount)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Admissible (state, action) index arrays in row-major order."""
        return self._pairs

    def expected_reward(self) -> np.ndarray:
        """``Σ_s' p(s'|s,a) r(s,a,s')`` as an ``(S, A)`` table."""
        return np.einsum("ijk,ijk->ij", self.transitions, self.reward)

    def with_transitions(self, transitions: np.ndarray, name: str | None = None) -> "MdpModel":
        return MdpModel(self.reward, transitions, self.discount, self.admissible,
                        self.state_labels, self.action_labels, name or self.name)

    def with_discount(self, discount: float) -> "MdpModel":
        return MdpModel(self.reward, self.transitions, discount, self.admissible,
                        self.state_labels, self.action_labels, self.name)


def state_values(model: MdpModel, q: np.ndarray) -> np.ndarray:
    """``max_b Q(s, b)`` over admissible actions."""
    return np.where(model.admissible, q, -np.inf).max(axis=1)


def greedy_policy(q: np.ndarray, model: MdpModel | None = None) -> np.ndarray:
    """Deterministic greedy policy; ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    if model is not None:
        q = np.where(model.admissible, q, -np.inf)
    return np.argmax(q, axis=1)


def exact_bellman(model: MdpModel, q: np.ndarray) -> np.ndarray:
    v = state_values(model, q)
    out = model.expected_reward() + model.discount * (model.transitions @ v)
    return np.where(model.admissible, out, 0.0)


def value_iteration(model: MdpModel, tol: float = 1e-10, max_sweeps: int = 10**6) -> np.ndarray:
    """Optimal Q of the true model, from Q = 0, to fixed-point residual ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    gamma = model.discount
    stop = tol * (1.0 - gamma) / gamma
    rbar = model.expected_reward()
    q = np.zeros((model.num_states, model.num_actions))
    for _ in range(max_sweeps):
        new = np.where(model.admissible, rbar + gamma * (model.transitions @ state_values(model, q)), 0.0)
        change = np.abs(new - q).max()
        q = new
        if change <= stop:
            return q
    raise ConvergenceError(f"value iteration did not converge in {max_sweeps} sweeps")


def policy_evaluation_exact(model: MdpModel, policy: Sequence[int]) -> np.ndarray:
    """Value of a deterministic policy under the true kernel, by a linear solve."""
    policy = np.asarray(policy, dtype=int)
    states = np.arange(model.num_states)
    if not model.admissible[states, policy].all():
        bad = states[~model.admissible[states, policy]]
        raise ValueError(f"policy picks inadmissible actions at states {bad.tolist()}")
    p = model.transitions[states, policy]
    r = np.einsum("ij,ij->i", p, model.reward[states, policy])
    return np.linalg.solve(np.eye(model.num_states) - model.discount * p, r)


# -- benchmark environments -------------------------------------------------

def poisson_binomial_pmf(probs: Sequence[float]) -> np.ndarray:
    """Distribution of the number of successes among independent Bernoullis."""
    pmf = np.array([1.0])
    for p in probs:
        pmf = np.convolve(pmf, [1.0 - p, p])
    return pmf


def coin_toss_reward(s: int, a: int, s_next: int) -> int:
    return a * (s < s_next) - a * (s > s_next) - abs(a) * (s == s_next)


def coin_toss_env(num_coins: int = 10, head_probs: Sequence[float] | None = None,
                  discount: float = 0.95) -> MdpModel:
    """Guess whether the next toss of ``num_coins`` coins shows more heads.

    States are head counts 0..K; action index 0, 1, 2 means guess -1 (fewer),
    0 (pass), +1 (more).  The next toss ignores the current state and action.
    """
    if num_coins < 1:
        raise ValueError("need at least one coin")
    probs = np.full(num_coins, 0.5) if head_probs is None else np.asarray(head_probs, float)
    if probs.shape != (num_coins,):
        raise ValueError(f"expected {num_coins} head probabilities, got {probs.shape}")
    if ((probs <= 0) | (probs >= 1)).any():
        raise ValueError("head probabilities must lie strictly inside (0, 1)")
    S = num_coins + 1
    actions = np.array([-1, 0, 1])
    row = poisson_binomial_pmf(probs)
    row = row / row.sum()
    trans = np.broadcast_to(row, (S, 3, S)).copy()
    s, a, sn = np.meshgrid(np.arange(S), actions, np.arange(S), indexing="ij")
    reward = a * (s < sn) - a * (s > sn) - np.abs(a) * (s == sn)
    return MdpModel(reward.astype(float), trans, discount, action_labels=actions, name="coin-toss")


def truncated_poisson_pmf(mean: float, support_max: int) -> np.ndarray:
    """Poisson(mean) conditioned on {0..support_max}."""
    if mean <= 0:
        raise ValueError("Poisson mean must be positive")
    d = np.arange(support_max + 1)
    logp = d * math.log(mean) - mean - np.array([math.lgamma(k + 1) for k in d])
    w = np.exp(logp - logp.max())
    return w / w.sum()


def inventory_next_state(level: int, order: int, demand: int, capacity: int) -> int:
    """Next state after ordering; negative states record lost demand."""
    stock = max(level, 0)
    if order < 0 or order > capacity - stock:
        raise ValueError(f"order {order} infeasible at level {level} with capacity {capacity}")
    on_hand = stock + order
    return on_hand - demand if demand <= on_hand else -(demand - on_hand)


def inventory_reward(level: int, order: int, next_level: int, *, order_cost: float,
                     profit: float, penalty: float, holding: float) -> float:
    sold = max(level, 0) + order - max(next_level, 0)
    return -(order_cost * order + holding * max(next_level, 0)
             + penalty * max(-next_level, 0)) + profit * sold


def inventory_env(capacity: int = 10, order_cost: float = 1.0, profit: float = 5.0,
                  penalty: float = 2.0, holding: float = 1.0,
                  demand_pmf: Callable[[int], np.ndarray] | None = None,
                  discount: float = 0.95, name: str = "inventory") -> MdpModel:
    """Capacitated lost-sales inventory on states ``-K..K``.

    ``demand_pmf(level)`` returns the demand distribution over ``0..K`` seen
    in a period that starts at ``level``; the default is uniform.
    """
    K = capacity
    if K < 1:
        raise ValueError("capacity must be at least 1")
    if demand_pmf is None:
        demand_pmf = lambda level: np.full(K + 1, 1.0 / (K + 1))  # noqa: E731
    levels = np.arange(-K, K + 1)
    S, A = 2 * K + 1, K + 1
    trans = np.zeros((S, A, S))
    reward = np.zeros((S, A, S))
    adm = np.zeros((S, A), bool)
    costs = dict(order_cost=order_cost, profit=profit, penalty=penalty, holding=holding)
    for i, level in enumerate(levels):
        pmf = np.asarray(demand_pmf(int(level)), float)
        if pmf.shape != (K + 1,) or abs(pmf.sum() - 1.0) > 1e-9 or (pmf < 0).any():
            raise ValueError(f"demand pmf at level {level} must be a distribution over 0..{K}")
        pmf = pmf / pmf.sum()
        for a in range(K - max(level, 0) + 1):
            adm[i, a] = True
            for d, pd in enumerate(pmf):
                trans[i, a, inventory_next_state(level, a, d, K) + K] += pd
            for j, nxt in enumerate(levels):
                reward[i, a, j] = inventory_reward(level, a, nxt, **costs)
        # inadmissible rows: harmless self-loops so every row is a distribution
        trans[i, ~adm[i], i] = 1.0
    return MdpModel(reward, trans, discount, adm, state_labels=levels, name=name)


def state_dependent_poisson(capacity: int, base: float = 2.0, slope: float = 2.0):
    """Demand law whose truncated-Poisson mean is ``base + slope * s⁺ / K``."""
    def pmf(level: int) -> np.ndarray:
        return truncated_poisson_pmf(base + slope * max(level, 0) / capacity, capacity)
    return pmf


# -- plain-text dumps -------------------------------------------------------

def dump_kernel(model: MdpModel) -> str:
    """One line per admissible (s, a): ``s a p_0 .. p_{S-1} r_0 .. r_{S-1}``."""
    lines = []
    for s, a in zip(*model.pairs()):
        vals = " ".join(repr(float(x)) for x in np.concatenate([model.transitions[s, a], model.reward[s, a]]))
        lines.append(f"{s} {a} {vals}")
    return "\n".join(lines) + "\n"


def dump_q(model: MdpModel, q: np.ndarray) -> str:
    return "".join(f"{s} {a} {float(q[s, a])!r}\n" for s, a in zip(*model.pairs()))


def load_q(text: str, shape: tuple[int, int]) -> np.ndarray:
    q = np.zeros(shape)
    for line in text.splitlines():
        if line.strip():
            s, a, v = line.split()
            q[int(s), int(a)] = float(v)
    return q
