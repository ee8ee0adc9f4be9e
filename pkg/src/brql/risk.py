"""Monte Carlo VaR / CVaR / mean estimators of the posterior Bellman operator.

Rewards are maximised, so VaR_α is a lower quantile and CVaR_α is the mean of
the lower α-tail.  With N samples the VaR estimate is the ⌈Nα⌉-th smallest
value and the CVaR estimate is the average of the ⌈Nα⌉ smallest values.
"""

from __future__ import annotations

import math

from dataclasses import dataclass

import numpy as np

from .mdp import MdpModel, state_values
from .posterior import DirichletPosterior

try:
    from . import _fast
except ImportError:  # numba missing: numpy path only
    _fast = None

KINDS = ("var", "cvar", "mean")


@dataclass(frozen=True)
class RiskFunctional:
    kind: str
    alpha: float = 1.0

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in KINDS:
            raise ValueError(f"unknown risk functional {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if kind != "mean" and not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")

    def __str__(self):
        if self.kind == "mean":
            return "Mean"
        return f"{'VaR' if self.kind == 'var' else 'CVaR'}({self.alpha:g})"


def VaR(alpha: float) -> RiskFunctional:
    return RiskFunctional("var", alpha)


def CVaR(alpha: float) -> RiskFunctional:
    return RiskFunctional("cvar", alpha)


def Mean() -> RiskFunctional:
    return RiskFunctional("mean")


def order_index(n, alpha: float):
    """``⌈n α⌉`` clipped to ``[1, n]``.

    The product is rounded to 9 decimals first so that e.g. 30 * 0.1 gives 3,
    not 4 from binary representation error.
    """
    if np.ndim(n) == 0:
        return min(max(math.ceil(round(n * alpha, 9)), 1), int(n))
    k = np.ceil(np.round(n * alpha, 9)).astype(np.int64)
    return np.minimum(np.maximum(k, 1), n)


def f_eval(p: np.ndarray, s: int, a: int, q: np.ndarray, model: MdpModel) -> float:
    """Expected one-step value ``Σ_s' p(s')[r(s,a,s') + γ max_b Q(s',b)]``."""
    return float(np.asarray(p) @ (model.reward[s, a] + model.discount * state_values(model, q)))


def estimate_from_samples(values, risk: RiskFunctional) -> float:
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("need at least one sample")
    if risk.kind == "mean":
        return float(x.mean())
    x = np.sort(x)
    k = order_index(x.size, risk.alpha)
    return float(x[k - 1]) if risk.kind == "var" else float(x[:k].mean())


def estimate_bellman_from_kernels(kernels: np.ndarray, s: int, a: int, q: np.ndarray,
                                  risk: RiskFunctional, model: MdpModel) -> float:
    """Estimator on externally supplied kernel draws (rows of ``kernels``)."""
    w = model.reward[s, a] + model.discount * state_values(model, q)
    return estimate_from_samples(np.asarray(kernels) @ w, risk)


def estimate_bellman(posterior: DirichletPosterior, s: int, a: int, q: np.ndarray, n_samples: int,
                     risk: RiskFunctional, rng: np.random.Generator, model: MdpModel) -> float:
    if risk.kind == "mean":
        # f is affine in p, so the posterior expectation is f at the posterior mean
        return f_eval(posterior.mean(s, a), s, a, q, model)
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    return estimate_bellman_from_kernels(posterior.sample(s, a, rng, n_samples), s, a, q, risk, model)


def segment_estimates(values: np.ndarray, sizes: np.ndarray, risk: RiskFunctional) -> np.ndarray:
    """Row-wise estimates from a padded ``(P, N_max)`` value array.

    Row ``i`` holds ``sizes[i]`` valid samples in its leading columns; the
    rest is ignored.
    """
    P, width = values.shape
    if (sizes == width).all():
        if risk.kind == "mean":
            return values.mean(axis=1)
        k = order_index(width, risk.alpha)
        x = np.sort(values, axis=1)
        return x[:, k - 1] if risk.kind == "var" else x[:, :k].mean(axis=1)
    cols = np.arange(width)
    if risk.kind == "mean":
        return np.where(cols < sizes[:, None], values, 0.0).sum(axis=1) / sizes
    x = np.sort(np.where(cols < sizes[:, None], values, np.inf), axis=1)
    k = order_index(sizes, risk.alpha)
    if risk.kind == "var":
        return x[np.arange(P), k - 1]
    return np.where(cols < k[:, None], x, 0.0).sum(axis=1) / k


def draw_pair_kernels(posterior: DirichletPosterior, states: np.ndarray, actions: np.ndarray,
                      sizes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Kernel draws for many pairs at once, stacked pair after pair."""
    counts = posterior.counts[states, actions]
    if (sizes == sizes[0]).all():
        shapes = np.broadcast_to(counts[:, None, :], (counts.shape[0], int(sizes[0]), counts.shape[1]))
        shapes = shapes.reshape(-1, counts.shape[1])
    else:
        shapes = np.repeat(counts, sizes, axis=0)
    g = rng.standard_gamma(shapes)
    return g / g.sum(axis=1, keepdims=True)


def sweep_targets(posterior: DirichletPosterior, q: np.ndarray, sizes: np.ndarray,
                  risk: RiskFunctional, rng: np.random.Generator, model: MdpModel,
                  compiled: bool = True) -> np.ndarray:
    """Estimated Bellman targets for every admissible pair, all from the same ``q``.

    ``sizes`` is an ``(S, A)`` table of per-pair sample counts.  Returns an
    ``(S, A)`` table with zeros at inadmissible pairs.  ``compiled`` selects
    the numba loop; it draws the same variates as the numpy path.
    """
    states, actions = model.pairs()
    w = model.pair_reward + model.discount * state_values(model, q)
    out = np.zeros(q.shape)
    if risk.kind == "mean":
        out[states, actions] = np.einsum("ij,ij->i", posterior.mean()[states, actions], w)
        return out
    n = sizes[states, actions]
    if compiled and _fast is not None:
        kind = _fast.VAR if risk.kind == "var" else _fast.CVAR
        out[states, actions] = _fast.sampled_targets(
            rng, posterior.counts[states, actions], n.astype(np.int64), w, kind, float(risk.alpha))
        return out
    kernels = draw_pair_kernels(posterior, states, actions, n, rng)
    if (n == n[0]).all():
        x = np.einsum("pns,ps->pn", kernels.reshape(n.size, int(n[0]), -1), w)
    else:
        x = pad_segments(np.einsum("ij,ij->i", kernels, np.repeat(w, n, axis=0)), n)
    out[states, actions] = segment_estimates(x, n, risk)
    return out


def pad_segments(x: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Scatter concatenated segments into rows of a zero-padded array."""
    if (sizes == sizes[0]).all():
        return x.reshape(sizes.size, int(sizes[0]))
    starts = np.cumsum(sizes) - sizes
    rows = np.repeat(np.arange(sizes.size), sizes)
    cols = np.arange(x.size) - np.repeat(starts, sizes)
    out = np.zeros((sizes.size, int(sizes.max())))
    out[rows, cols] = x
    return out
