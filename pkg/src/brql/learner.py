"""Multi-stage Bayesian risk-averse Q-learning with streaming observations.

Each stage ingests a batch of real-world transitions (posterior update plus
per-pair sample-size adaptation) and then runs synchronous Q sweeps whose
targets are Monte Carlo risk estimates under the current posterior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Protocol

import numpy as np

from .mdp import MdpModel, greedy_policy, policy_evaluation_exact
from .posterior import DirichletPosterior, as_batch, init_uniform_prior, validate_batch
from .risk import Mean, RiskFunctional, sweep_targets

try:
    from . import _fast
except ImportError:
    _fast = None

log = logging.getLogger(__name__)

RATE_EXPONENT = 0.7


def default_rate(step: int) -> float:
    """``ℓ^-0.7``: sums to infinity while its squares stay summable."""
    if step < 1:
        raise ValueError("learning-rate index starts at 1")
    return float(step) ** -RATE_EXPONENT


def polynomial_rate(exponent: float) -> Callable[[int], float]:
    if not 0.5 < exponent <= 1.0:
        raise ValueError("need 0.5 < exponent <= 1 for Σλ = ∞ and Σλ² < ∞")
    return lambda step: float(step) ** -exponent


class StreamExhausted(RuntimeError):
    pass


@dataclass
class StageSchedule:
    """Stage horizon T with per-stage batch sizes n(t) and sweep counts m(t)."""

    horizon: int
    batch_size: int | Callable[[int], int] = 1
    sweeps: int | Callable[[int], int] = 1

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")

    def n(self, t: int) -> int:
        n = self.batch_size(t) if callable(self.batch_size) else self.batch_size
        if n < 0:
            raise ValueError(f"batch size at stage {t} is negative")
        return int(n)

    def m(self, t: int) -> int:
        m = self.sweeps(t) if callable(self.sweeps) else self.sweeps
        if m < 1:
            raise ValueError(f"stage {t} needs at least one sweep")
        return int(m)

    def total_observations(self) -> int:
        return sum(self.n(t) for t in range(1, self.horizon + 1))


# -- observation streams ----------------------------------------------------

class ObservationStream(Protocol):
    def next_batch(self, n: int) -> np.ndarray: ...


class CoveringStream:
    """I.i.d. uniform admissible (s, a) with ``s' ~ p(·|s, a)``."""

    def __init__(self, model: MdpModel, rng: np.random.Generator, chunk: int = 4096):
        self.model = model
        self.rng = rng
        self.chunk = chunk
        self.states, self.actions = model.pairs()
        self._buffer = np.zeros((0, 3), np.int64)

    def _draw(self, n: int) -> np.ndarray:
        idx = self.rng.integers(self.states.size, size=n)
        s, a = self.states[idx], self.actions[idx]
        cdf = np.cumsum(self.model.transitions[s, a], axis=1)
        u = self.rng.random(n)[:, None]
        sn = np.minimum((u >= cdf).sum(axis=1), self.model.num_states - 1)
        return np.stack([s, a, sn], axis=1).astype(np.int64)

    def next_batch(self, n: int) -> np.ndarray:
        # draws come in fixed-size chunks so the sequence does not depend on n
        while len(self._buffer) < n:
            self._buffer = np.concatenate([self._buffer, self._draw(self.chunk)])
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out


class TrajectoryStream:
    """One long trajectory of the true MDP under a uniformly random behaviour policy."""

    def __init__(self, model: MdpModel, rng: np.random.Generator, start: int | None = None):
        self.model = model
        self.rng = rng
        self.state = int(rng.integers(model.num_states)) if start is None else start

    def next_batch(self, n: int) -> np.ndarray:
        out = np.zeros((n, 3), np.int64)
        S = self.model.num_states
        for i in range(n):
            allowed = np.flatnonzero(self.model.admissible[self.state])
            a = int(allowed[self.rng.integers(allowed.size)])
            sn = int(self.rng.choice(S, p=self.model.transitions[self.state, a]))
            out[i] = self.state, a, sn
            self.state = sn
        return out


class ReplayStream:
    """Replays a recorded dataset in order."""

    def __init__(self, data):
        self.data = as_batch(data)
        self.pos = 0

    def next_batch(self, n: int) -> np.ndarray:
        if self.pos + n > len(self.data):
            raise StreamExhausted(f"asked for {n} observations with {len(self.data) - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


# -- learner state and steps -------------------------------------------------

@dataclass
class LearnerState:
    q: np.ndarray
    posterior: DirichletPosterior
    sizes: np.ndarray
    n_min: int = 10
    max_size: int | None = None
    global_step: int = 0
    stage: int = 0

    @classmethod
    def initial(cls, model: MdpModel, n_min: int = 10, prior: DirichletPosterior | None = None,
                max_size: int | None = None) -> "LearnerState":
        if n_min < 1:
            raise ValueError("minimal sample size must be at least 1")
        if max_size is not None and max_size < n_min:
            raise ValueError("sample-size cap must be at least the minimal sample size")
        shape = (model.num_states, model.num_actions)
        posterior = init_uniform_prior(model) if prior is None else prior.copy()
        return cls(np.zeros(shape), posterior, np.full(shape, n_min, np.int64), n_min, max_size)


def adapt_sample_sizes(state: LearnerState, batch) -> LearnerState:
    """Ingest ``batch`` one observation at a time.

    The observed pair's sample size drops by one (floored at ``n_min``); every
    other admissible pair's grows by one (capped at ``max_size`` if set).
    """
    batch = as_batch(batch)
    if not len(batch):
        return state
    validate_batch(batch, state.posterior.admissible)
    step = state.posterior.admissible.astype(np.int64)
    sizes, counts, cap = state.sizes, state.posterior.counts, state.max_size
    for s, a, sn in batch.tolist():
        old = sizes[s, a]
        sizes += step
        if cap is not None:
            np.minimum(sizes, cap, out=sizes)
        sizes[s, a] = max(old - 1, state.n_min)
        counts[s, a, sn] += 1.0
    return state


def q_sweep(state: LearnerState, rng: np.random.Generator, model: MdpModel, risk: RiskFunctional,
            rate: Callable[[int], float] = default_rate) -> LearnerState:
    """One synchronous update of every pair from the pre-sweep Q table."""
    lam = rate(state.global_step + 1)
    targets = sweep_targets(state.posterior, state.q, state.sizes, risk, rng, model)
    state.q = np.where(model.admissible, (1.0 - lam) * state.q + lam * targets, 0.0)
    state.global_step += 1
    return state


@dataclass
class Snapshot:
    stage: int
    global_step: int
    q: np.ndarray
    policy: np.ndarray
    deployed_value: np.ndarray | None
    min_size: int
    max_size: int

    @property
    def q_sup_norm(self) -> float:
        return float(np.abs(self.q).max())

    def deployed_mean(self, initial: np.ndarray | None = None) -> float:
        """Scalar summary of the deployed value: mean over the start distribution."""
        if self.deployed_value is None:
            return float("nan")
        if initial is None:
            return float(self.deployed_value.mean())
        return float(initial @ self.deployed_value)


def take_snapshot(state: LearnerState, model: MdpModel, evaluate: bool = True,
                  cache: dict | None = None) -> Snapshot:
    policy = greedy_policy(state.q, model)
    value = None
    if evaluate:
        key = policy.tobytes()
        if cache is None or key not in cache:
            value = policy_evaluation_exact(model, policy)
            if cache is not None:
                cache[key] = value
        else:
            value = cache[key]
    adm = model.admissible
    return Snapshot(state.stage, state.global_step, state.q.copy(), policy, value,
                    int(state.sizes[adm].min()), int(state.sizes[adm].max()))


def iterate_stages(model: MdpModel, schedule: StageSchedule, stream: ObservationStream,
                   ingest: Callable[[np.ndarray], None], sweep: Callable[[], None],
                   state, evaluate: bool = True) -> Iterator[Snapshot]:
    """Shared outer loop: stage t ingests n(t) observations then runs m(t) sweeps."""
    values: dict = {}
    yield take_snapshot(state, model, evaluate, values)
    for t in range(1, schedule.horizon + 1):
        n = schedule.n(t)
        batch = stream.next_batch(n) if n else np.zeros((0, 3), np.int64)
        if len(batch) != n:
            raise StreamExhausted(f"stage {t}: expected {n} observations, got {len(batch)}")
        ingest(batch)
        state.stage = t
        for _ in range(schedule.m(t)):
            sweep()
        yield take_snapshot(state, model, evaluate, values)


def run(model: MdpModel, schedule: StageSchedule, stream: ObservationStream, risk: RiskFunctional,
        rng: np.random.Generator, *, rate: Callable[[int], float] = default_rate, n_min: int = 10,
        initial_batch=None, prior: DirichletPosterior | None = None, max_sample_size: int | None = None,
        evaluate: bool = True, state: LearnerState | None = None,
        compiled: bool | None = None) -> list[Snapshot]:
    """Run the multi-stage learner and return one snapshot per stage (stage 0 first).

    ``initial_batch`` is prior data: it updates the posterior before the first
    sweep but does not touch the sample sizes.  ``compiled`` picks the numba
    stage loop (default when numba is importable); it pulls every stage's
    batch from ``stream`` up front and otherwise matches the Python loop.
    """
    if state is None:
        state = LearnerState.initial(model, n_min, prior, max_sample_size)
    if initial_batch is not None:
        state.posterior.observe(initial_batch)
    if compiled is None:
        compiled = _fast is not None
    if compiled:
        return _run_compiled(model, schedule, stream, risk, rng, rate, state, evaluate)
    return list(iterate_stages(
        model, schedule, stream,
        ingest=lambda batch: adapt_sample_sizes(state, batch),
        sweep=lambda: q_sweep(state, rng, model, risk, rate),
        state=state, evaluate=evaluate))


def _run_compiled(model, schedule, stream, risk, rng, rate, state, evaluate) -> list[Snapshot]:
    if _fast is None:
        raise RuntimeError("compiled stage loop needs numba")
    T = schedule.horizon
    stage_n = np.array([schedule.n(t) for t in range(1, T + 1)], np.int64)
    stage_m = np.array([schedule.m(t) for t in range(1, T + 1)], np.int64)
    batches = []
    for t, n in enumerate(stage_n, start=1):
        batch = as_batch(stream.next_batch(int(n))) if n else np.zeros((0, 3), np.int64)
        if len(batch) != n:
            raise StreamExhausted(f"stage {t}: expected {n} observations, got {len(batch)}")
        batches.append(batch)
    obs = np.concatenate(batches) if batches else np.zeros((0, 3), np.int64)
    validate_batch(obs, model.admissible)
    start = state.global_step
    rates = np.array([rate(start + l) for l in range(1, int(stage_m.sum()) + 1)], float)
    kind = {"var": _fast.VAR, "cvar": _fast.CVAR, "mean": _fast.MEAN}[risk.kind]
    ps, pa = model.pairs()
    cap = -1 if state.max_size is None else state.max_size
    stage0 = state.stage
    q_hist, size_hist = _fast.run_stages(
        rng, state.q, state.posterior.counts, state.sizes, model.admissible, ps.astype(np.int64),
        pa.astype(np.int64), model.pair_reward, model.discount, kind, float(risk.alpha),
        state.n_min, cap, obs, stage_n, stage_m, rates)
    steps = start + np.concatenate([[0], np.cumsum(stage_m)])
    state.global_step = int(steps[-1])
    state.stage = stage0 + T
    cache: dict = {}
    snaps = []
    for t in range(T + 1):
        policy = greedy_policy(q_hist[t], model)
        value = None
        if evaluate:
            key = policy.tobytes()
            if key not in cache:
                cache[key] = policy_evaluation_exact(model, policy)
            value = cache[key]
        snaps.append(Snapshot(stage0 + t, int(steps[t]), q_hist[t], policy, value,
                              int(size_hist[t, 0]), int(size_hist[t, 1])))
    return snaps


@dataclass
class BRQLearner:
    """Bayesian risk-averse Q-learner; ``risk=Mean()`` gives the risk-neutral variant."""

    risk: RiskFunctional
    n_min: int = 10
    rate: Callable[[int], float] = default_rate
    max_sample_size: int | None = None
    name: str = field(default="")

    def __post_init__(self):
        if not self.name:
            self.name = f"BRQL-{'mean' if self.risk.kind == 'mean' else str(self.risk)}"

    def run(self, model: MdpModel, schedule: StageSchedule, stream: ObservationStream,
            rng: np.random.Generator, initial_batch=None, evaluate: bool = True) -> list[Snapshot]:
        return run(model, schedule, stream, self.risk, rng, rate=self.rate, n_min=self.n_min,
                   initial_batch=initial_batch, max_sample_size=self.max_sample_size, evaluate=evaluate)


def brql_mean_learner(**kwargs) -> BRQLearner:
    return BRQLearner(Mean(), **kwargs)


def trace_csv(snapshots: list[Snapshot]) -> str:
    lines = ["stage,global_step,deployed_value,q_sup_norm,min_sample_size,max_sample_size"]
    for snap in snapshots:
        lines.append(f"{snap.stage},{snap.global_step},{snap.deployed_mean()!r},"
                     f"{snap.q_sup_norm!r},{snap.min_size},{snap.max_size}")
    return "\n".join(lines) + "\n"
