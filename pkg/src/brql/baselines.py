"""Distributionally robust Q-learning baselines with a frozen nominal kernel.

The ambiguity set is a KL or Wasserstein ball around an empirical kernel
estimated once from the initial data batch; later observations are read from
the stream but ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .learner import (LearnerState, ObservationStream, Snapshot, StageSchedule, default_rate,
                      iterate_stages)
from .mdp import MdpModel, state_values
from .posterior import as_batch, validate_batch

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
BETA_FLOOR = 1e-8


def kl_dual(p_hat: np.ndarray, x: np.ndarray, delta: float, beta: np.ndarray) -> np.ndarray:
    """``-β log E_p̂ exp(-x/β) - βδ``, evaluated stably, row-wise over leading dims."""
    support = p_hat > 0
    m = np.where(support, x, np.inf).min(axis=-1, keepdims=True)
    gap = np.where(support, x - m, 0.0)
    # expm1/log1p keep precision when β is huge and every exponent is tiny
    z = np.where(support, np.expm1(-gap / beta[..., None]), 0.0)
    return m[..., 0] - beta * np.log1p((p_hat * z).sum(axis=-1)) - beta * delta


def kl_robust_target(p_hat, x, delta: float, rtol: float = 1e-8) -> np.ndarray | float:
    """``inf {E_p x : KL(p || p̂) <= δ}`` via its one-dimensional dual.

    The dual is concave in β, so golden-section search on
    ``[1e-8, (max x - min x)/δ + 1]`` finds the maximiser.  Works row-wise
    on stacked inputs.
    """
    p_hat = np.asarray(p_hat, float)
    x = np.asarray(x, float)
    nominal = (p_hat * x).sum(axis=-1)
    if delta < 0:
        raise ValueError("radius must be non-negative")
    if delta == 0:
        return nominal
    support = p_hat > 0
    lo_x = np.where(support, x, np.inf).min(axis=-1)
    hi_x = np.where(support, x, -np.inf).max(axis=-1)
    flat = hi_x - lo_x <= 0
    a = np.full(nominal.shape, BETA_FLOOR)
    with np.errstate(over="ignore"):
        b = np.minimum(np.where(flat, 1.0, (hi_x - lo_x) / delta + 1.0), 1e300)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = kl_dual(p_hat, x, delta, c), kl_dual(p_hat, x, delta, d)
    tol = rtol * b
    while ((b - a) > tol).any():
        left = fc > fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = np.where(left, b - GOLDEN * (b - a), d)
        new_d = np.where(left, c, a + GOLDEN * (b - a))
        c, d = new_c, new_d
        fc_new = np.where(left, kl_dual(p_hat, x, delta, c), fd)
        fd_new = np.where(left, fc, kl_dual(p_hat, x, delta, d))
        fc, fd = fc_new, fd_new
    best = np.maximum(np.maximum(fc, fd), kl_dual(p_hat, x, delta, np.full(nominal.shape, BETA_FLOOR)))
    out = np.clip(best, lo_x, nominal)
    out = np.where(flat, nominal, out)
    return float(out) if out.ndim == 0 else out


def wasserstein_robust_target(p_hat, x, delta: float) -> np.ndarray | float:
    """Worst-case mean over a Wasserstein ball with the 0/1 ground metric.

    Under that metric the ball is a total-variation ball, and the worst case
    moves up to ``δ`` mass from the highest-valued states onto the lowest.
    """
    if delta < 0:
        raise ValueError("radius must be non-negative")
    p_hat = np.asarray(p_hat, float)
    x = np.asarray(x, float)
    order = np.argsort(-x, axis=-1, kind="stable")
    xs = np.take_along_axis(x, order, axis=-1)
    ps = np.take_along_axis(p_hat, order, axis=-1)
    before = np.cumsum(ps, axis=-1) - ps
    moved = np.clip(min(delta, 1.0) - before, 0.0, ps)
    x_min = x.min(axis=-1, keepdims=True)
    out = (p_hat * x).sum(axis=-1) - (moved * (xs - x_min)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


ROBUST_TARGETS = {"kl": kl_robust_target, "wasserstein": wasserstein_robust_target}


def empirical_kernel(model: MdpModel, batch) -> np.ndarray:
    """Observed transition frequencies; unobserved pairs fall back to uniform."""
    batch = as_batch(batch)
    validate_batch(batch, model.admissible)
    S, A = model.num_states, model.num_actions
    counts = np.zeros((S, A, S))
    np.add.at(counts, (batch[:, 0], batch[:, 1], batch[:, 2]), 1.0)
    tot = counts.sum(axis=2, keepdims=True)
    return np.where(tot > 0, counts / np.where(tot > 0, tot, 1.0), 1.0 / S)


def robust_sweep(q: np.ndarray, p_hat: np.ndarray, model: MdpModel, kind: str, delta: float) -> np.ndarray:
    states, actions = model.pairs()
    w = model.pair_reward + model.discount * state_values(model, q)
    out = np.zeros(q.shape)
    out[states, actions] = ROBUST_TARGETS[kind](p_hat[states, actions], w, delta)
    return out


def robust_value_iteration(model: MdpModel, p_hat: np.ndarray, kind: str, delta: float,
                           tol: float = 1e-8, max_sweeps: int = 10**6) -> np.ndarray:
    """Fixed point of the robust Bellman operator at a frozen nominal kernel."""
    from .mdp import ConvergenceError

    stop = tol * (1.0 - model.discount) / model.discount
    q = np.zeros((model.num_states, model.num_actions))
    for _ in range(max_sweeps):
        new = robust_sweep(q, p_hat, model, kind, delta)
        if np.abs(new - q).max() <= stop:
            return new
        q = new
    raise ConvergenceError("robust value iteration hit its sweep cap")


@dataclass
class DRQLearner:
    """Robust Q-learning against a KL or 0/1-Wasserstein ball of radius ``delta``."""

    kind: str
    delta: float
    rate: Callable[[int], float] = default_rate
    name: str = field(default="")

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind in ("wass", "w1"):
            self.kind = "wasserstein"
        if self.kind not in ROBUST_TARGETS:
            raise ValueError(f"unknown ambiguity set {self.kind!r}")
        if self.delta < 0:
            raise ValueError("radius must be non-negative")
        if not self.name:
            self.name = "DRQL-KL" if self.kind == "kl" else "DRQL-Wass"

    def run(self, model: MdpModel, schedule: StageSchedule, stream: ObservationStream,
            rng: np.random.Generator | None = None, initial_batch=None,
            evaluate: bool = True) -> list[Snapshot]:
        p_hat = empirical_kernel(model, [] if initial_batch is None else initial_batch)
        state = LearnerState.initial(model, n_min=1)
        delta, kind, rate = self.delta, self.kind, self.rate

        def sweep():
            lam = rate(state.global_step + 1)
            targets = robust_sweep(state.q, p_hat, model, kind, delta)
            state.q = np.where(model.admissible, (1.0 - lam) * state.q + lam * targets, 0.0)
            state.global_step += 1

        return list(iterate_stages(model, schedule, stream, ingest=lambda batch: None,
                                   sweep=sweep, state=state, evaluate=evaluate))


def drql_learner(kind: str, delta: float, **kwargs) -> DRQLearner:
    return DRQLearner(kind, delta, **kwargs)
