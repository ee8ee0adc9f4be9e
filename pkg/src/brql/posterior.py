"""Dirichlet posteriors over transition rows, one count vector per (s, a)."""

from __future__ import annotations

from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .mdp import MdpModel


class Observation(NamedTuple):
    s: int
    a: int
    s_next: int


def as_batch(batch: Iterable[Sequence[int]] | np.ndarray) -> np.ndarray:
    """Coerce observation triples to an ``(n, 3)`` int array."""
    arr = np.asarray(list(batch) if not isinstance(batch, np.ndarray) else batch, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"observations must be (s, a, s_next) triples, got shape {arr.shape}")
    return arr


def validate_batch(batch: np.ndarray, admissible: np.ndarray) -> None:
    S, A = admissible.shape
    if len(batch) <= 16:
        for i, (s, a, sn) in enumerate(batch.tolist()):
            if not (0 <= s < S and 0 <= a < A and 0 <= sn < S and admissible[s, a]):
                raise ValueError(f"invalid observation at index {i}: {(s, a, sn)}")
        return
    s, a, sn = batch.T
    ok = (s >= 0) & (s < S) & (a >= 0) & (a < A) & (sn >= 0) & (sn < S)
    ok[ok] = admissible[s[ok], a[ok]]
    if not ok.all():
        i = int(np.argmin(ok))
        raise ValueError(f"invalid observation at index {i}: {tuple(int(x) for x in batch[i])}")


class DirichletPosterior:
    """Per-pair Dirichlet count vectors ``φ_{s,a}(s')``.

    ``update`` returns a new posterior; ``observe`` mutates in place and is
    what the learners use inside their loops.
    """

    def __init__(self, counts: np.ndarray, admissible: np.ndarray, prior: np.ndarray | None = None):
        self.counts = np.array(counts, dtype=float)
        self.admissible = np.asarray(admissible, bool)
        self.prior = self.counts.copy() if prior is None else np.array(prior, dtype=float)
        if self.counts.ndim != 3 or self.counts.shape[:2] != self.admissible.shape:
            raise ValueError("counts must be (S, A, S) matching the admissible mask")
        if (self.counts[self.admissible] <= 0).any():
            raise ValueError("Dirichlet counts must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.counts.shape

    def copy(self) -> "DirichletPosterior":
        return DirichletPosterior(self.counts, self.admissible, self.prior)

    def observation_counts(self) -> np.ndarray:
        """Counts added on top of the prior (integral by construction)."""
        return self.counts - self.prior

    def observe(self, batch) -> None:
        batch = as_batch(batch)
        validate_batch(batch, self.admissible)
        np.add.at(self.counts, (batch[:, 0], batch[:, 1], batch[:, 2]), 1.0)

    def update(self, batch) -> "DirichletPosterior":
        new = self.copy()
        new.observe(batch)
        return new

    def mean(self, s: int | None = None, a: int | None = None) -> np.ndarray:
        if s is None:
            return self.counts / self.counts.sum(axis=2, keepdims=True)
        c = self.counts[s, a]
        return c / c.sum()

    def sample(self, s: int, a: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Dirichlet draw(s) at (s, a) via normalised Gamma(φ, 1) variates."""
        c = self.counts[s, a]
        g = rng.standard_gamma(c if size is None else np.broadcast_to(c, (size, c.size)))
        return g / g.sum(axis=-1, keepdims=True)

    def to_text(self) -> str:
        lines = []
        for s, a in zip(*np.nonzero(self.admissible)):
            lines.append(f"{s} {a} " + " ".join(repr(float(c)) for c in self.counts[s, a]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, admissible: np.ndarray, prior: np.ndarray | None = None) -> "DirichletPosterior":
        admissible = np.asarray(admissible, bool)
        S = admissible.shape[0]
        counts = np.ones(admissible.shape + (S,))
        for line in text.splitlines():
            if not line.strip():
                continue
            s, a, *vals = line.split()
            counts[int(s), int(a)] = [float(v) for v in vals]
        return cls(counts, admissible, prior)


def init_uniform_prior(model: MdpModel, weight: float = 1.0) -> DirichletPosterior:
    S, A = model.num_states, model.num_actions
    return DirichletPosterior(np.full((S, A, S), float(weight)), model.admissible)


def update(posterior: DirichletPosterior, batch) -> DirichletPosterior:
    return posterior.update(batch)


def posterior_mean(posterior: DirichletPosterior, s: int, a: int) -> np.ndarray:
    return posterior.mean(s, a)


def sample_kernel(posterior: DirichletPosterior, s: int, a: int, rng: np.random.Generator) -> np.ndarray:
    return posterior.sample(s, a, rng)


def point_mass_posterior(kernel: np.ndarray, admissible: np.ndarray, weight: float = 1e12,
                         floor: float = 1e-300) -> DirichletPosterior:
    """A posterior concentrated at ``kernel`` (counts ``weight * kernel``)."""
    return DirichletPosterior(np.maximum(weight * np.asarray(kernel, float), floor), admissible)
