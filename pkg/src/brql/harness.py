"""Seeded replication harness: configs, experiment drivers, aggregation, outputs."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib
import tomli_w

from .baselines import DRQLearner, empirical_kernel, robust_value_iteration
from .learner import (BRQLearner, CoveringStream, ReplayStream, StageSchedule, TrajectoryStream,
                      polynomial_rate)
from .mdp import (MdpModel, coin_toss_env, greedy_policy, inventory_env, policy_evaluation_exact,
                  state_dependent_poisson, truncated_poisson_pmf, value_iteration)
from .oracle import brmdp_fixed_point
from .posterior import init_uniform_prior
from .risk import CVaR, Mean, VaR

log = logging.getLogger(__name__)

Z95 = 1.96
ALGORITHM_KINDS = ("BRQL-VaR", "BRQL-CVaR", "BRQL-mean", "DRQL-KL", "DRQL-Wass")
ENV_KINDS = ("coin-toss", "inventory-I", "inventory-II", "inventory-poisson")
MODES = ("streaming-curve", "fixed-data-shift")
STREAMS = ("trajectory", "covering")

DEFAULTS = {
    "name": "experiment",
    "mode": "streaming-curve",
    "replications": 20,
    "seed": 0,
    "threads": 1,
    "environment": {"kind": "coin-toss", "discount": 0.95},
    "schedule": {"horizon": 100, "batch_size": 1, "sweeps": 1, "initial_batch": 10,
                 "n_min": 10, "stream": "trajectory"},
    "rate": {"family": "polynomial", "exponent": 0.7},
    "algorithms": [],
    "fixed": {"shift_means": [3.0], "n_big": 2000, "oracle_rel_tol": 1e-4},
    "notes": {"ci": "normal approximation, half-width 1.96*sd/sqrt(replications), sd with ddof=1",
              "deployed_value": "exact policy evaluation, averaged uniformly over start states"},
}

_ALGS = [{"kind": "BRQL-VaR", "alpha": 0.2}, {"kind": "BRQL-CVaR", "alpha": 0.2},
         {"kind": "BRQL-mean"}, {"kind": "DRQL-KL", "delta": 0.1}, {"kind": "DRQL-Wass", "delta": 0.1}]


def _with_alpha(algs, alpha=None, delta=None):
    out = copy.deepcopy(algs)
    for a in out:
        if alpha is not None and "alpha" in a:
            a["alpha"] = alpha
        if delta is not None and "delta" in a:
            a["delta"] = delta
    return out


PRESETS = {
    "coin-a02": {
        "name": "coin-a02", "replications": 100,
        "environment": {"kind": "coin-toss", "num_coins": 10, "head_probs": 0.5, "discount": 0.95},
        "schedule": {"horizon": 200, "batch_size": 1, "sweeps": 1, "initial_batch": 10, "n_min": 10,
                     "stream": "trajectory"},
        "algorithms": _with_alpha(_ALGS, 0.2, 0.1),
    },
    "coin-a04": {
        "name": "coin-a04", "replications": 100,
        "environment": {"kind": "coin-toss", "num_coins": 10, "head_probs": 0.5, "discount": 0.95},
        "schedule": {"horizon": 200, "batch_size": 1, "sweeps": 1, "initial_batch": 10, "n_min": 10,
                     "stream": "trajectory"},
        "algorithms": _with_alpha(_ALGS, 0.4, 0.1),
    },
    "inventory-stream": {
        "name": "inventory-stream", "replications": 100,
        "environment": {"kind": "inventory-I", "capacity": 10, "discount": 0.95},
        "schedule": {"horizon": 60, "batch_size": 5, "sweeps": 5, "initial_batch": 20, "n_min": 10,
                     "stream": "trajectory"},
        "algorithms": _with_alpha(_ALGS, 0.2, 0.05),
    },
    "inventory-fixed": {
        "name": "inventory-fixed", "replications": 100, "mode": "fixed-data-shift",
        "environment": {"kind": "inventory-poisson", "capacity": 10, "demand_mean": 3.0,
                        "discount": 0.95},
        "schedule": {"horizon": 0, "initial_batch": 30, "n_min": 10, "stream": "trajectory"},
        "algorithms": _with_alpha(_ALGS, 0.2, 0.05),
        "fixed": {"shift_means": [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0], "n_big": 2000,
                  "oracle_rel_tol": 1e-4},
    },
}


class ConfigError(ValueError):
    """Every validation failure found in a config, reported together."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class AlgorithmSpec:
    kind: str
    alpha: float | None = None
    delta: float | None = None
    name: str = ""

    def label(self) -> str:
        if self.name:
            return self.name
        return self.kind if self.alpha is None else f"{self.kind}({self.alpha:g})"


@dataclass
class ExperimentConfig:
    """Resolved experiment description; build with :meth:`from_dict` to validate."""

    raw: dict
    algorithms: list[AlgorithmSpec] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def replications(self) -> int:
        return self.raw["replications"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def threads(self) -> int:
        return self.raw["threads"]

    @property
    def env(self) -> dict:
        return self.raw["environment"]

    @property
    def schedule(self) -> dict:
        return self.raw["schedule"]

    @property
    def fixed(self) -> dict:
        return self.raw["fixed"]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        raw = _merge(DEFAULTS, data)
        problems = _validate(raw)
        if problems:
            raise ConfigError(problems)
        algs = [AlgorithmSpec(a["kind"], a.get("alpha"), a.get("delta"), a.get("name", ""))
                for a in raw["algorithms"]]
        return cls(raw, algs)

    @classmethod
    def from_toml(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError([f"config file not found: {path}"]) from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
        return cls.from_dict(data)

    @classmethod
    def preset(cls, name: str) -> "ExperimentConfig":
        if name not in PRESETS:
            raise ConfigError([f"unknown preset {name!r}; choose from {', '.join(PRESETS)}"])
        return cls.from_dict(PRESETS[name])

    def override(self, **kwargs) -> "ExperimentConfig":
        """New config with top-level fields replaced (``None`` values ignored)."""
        data = copy.deepcopy(self.raw)
        for k, v in kwargs.items():
            if v is not None:
                data[k] = v
        return ExperimentConfig.from_dict(data)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.raw)


def _validate(raw: dict) -> list[str]:
    bad = []

    def integer(value, where, lo):
        if isinstance(value, bool) or not isinstance(value, int) or value < lo:
            bad.append(f"{where} must be an integer >= {lo}, got {value!r}")

    def real(value, where):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            bad.append(f"{where} must be a finite number, got {value!r}")
            return False
        return True

    if raw.get("mode") not in MODES:
        bad.append(f"mode must be one of {MODES}, got {raw.get('mode')!r}")
    integer(raw.get("replications"), "replications", 1)
    integer(raw.get("seed"), "seed", 0)
    integer(raw.get("threads"), "threads", 1)

    env = raw.get("environment", {})
    kind = env.get("kind")
    if kind not in ENV_KINDS:
        bad.append(f"environment.kind must be one of {ENV_KINDS}, got {kind!r}")
    if real(env.get("discount"), "environment.discount") and not 0 < env["discount"] < 1:
        bad.append("environment.discount must lie in (0, 1)")
    if kind == "coin-toss":
        integer(env.get("num_coins", 10), "environment.num_coins", 1)
        hp = env.get("head_probs", 0.5)
        vals = hp if isinstance(hp, list) else [hp]
        if any(isinstance(p, bool) or not isinstance(p, (int, float)) or not 0 < p < 1 for p in vals):
            bad.append("environment.head_probs must lie strictly inside (0, 1)")
        elif isinstance(hp, list) and len(hp) != env.get("num_coins", 10):
            bad.append("environment.head_probs must have one entry per coin")
    elif kind in ENV_KINDS:
        integer(env.get("capacity", 10), "environment.capacity", 1)
        for key in ("order_cost", "profit", "penalty", "holding"):
            if key in env:
                real(env[key], f"environment.{key}")
        if kind == "inventory-poisson" and real(env.get("demand_mean"), "environment.demand_mean") \
                and env["demand_mean"] <= 0:
            bad.append("environment.demand_mean must be positive")

    sched = raw.get("schedule", {})
    integer(sched.get("horizon"), "schedule.horizon", 0 if raw.get("mode") == "fixed-data-shift" else 1)
    integer(sched.get("batch_size"), "schedule.batch_size", 0)
    integer(sched.get("sweeps"), "schedule.sweeps", 1)
    integer(sched.get("initial_batch"), "schedule.initial_batch", 0)
    integer(sched.get("n_min"), "schedule.n_min", 1)
    if "max_sample_size" in sched:
        integer(sched["max_sample_size"], "schedule.max_sample_size", sched.get("n_min", 1)
                if isinstance(sched.get("n_min"), int) else 1)
    if sched.get("stream") not in STREAMS:
        bad.append(f"schedule.stream must be one of {STREAMS}, got {sched.get('stream')!r}")

    rate = raw.get("rate", {})
    if rate.get("family") != "polynomial":
        bad.append(f"rate.family must be 'polynomial', got {rate.get('family')!r}")
    elif real(rate.get("exponent"), "rate.exponent") and not 0.5 < rate["exponent"] <= 1:
        bad.append("rate.exponent must lie in (0.5, 1] for the step sizes to be square-summable but not summable")

    algs = raw.get("algorithms")
    if not isinstance(algs, list) or not algs:
        bad.append("algorithms must be a non-empty list")
        algs = []
    labels = []
    for i, a in enumerate(algs):
        where = f"algorithms[{i}]"
        k = a.get("kind") if isinstance(a, dict) else None
        if k not in ALGORITHM_KINDS:
            bad.append(f"{where}.kind must be one of {ALGORITHM_KINDS}, got {k!r}")
            continue
        if k in ("BRQL-VaR", "BRQL-CVaR"):
            if "alpha" not in a:
                bad.append(f"{where}.alpha is required for {k}")
            elif real(a["alpha"], f"{where}.alpha") and not 0 < a["alpha"] < 1:
                bad.append(f"{where}.alpha must lie in (0, 1)")
        if k.startswith("DRQL"):
            if "delta" not in a:
                bad.append(f"{where}.delta is required for {k}")
            elif real(a["delta"], f"{where}.delta") and a["delta"] < 0:
                bad.append(f"{where}.delta must be non-negative")
        labels.append(a.get("name") or (k if "alpha" not in a else f"{k}({a['alpha']:g})"))
    if len(set(labels)) != len(labels):
        bad.append("algorithm labels must be unique (set 'name' to disambiguate)")

    if raw.get("mode") == "fixed-data-shift":
        fx = raw.get("fixed", {})
        if kind not in ("inventory-poisson",):
            bad.append("fixed-data-shift mode needs environment.kind = 'inventory-poisson'")
        means = fx.get("shift_means")
        if not isinstance(means, list) or not means or not all(
                isinstance(m, (int, float)) and not isinstance(m, bool) and m > 0 for m in means):
            bad.append("fixed.shift_means must be a non-empty list of positive numbers")
        integer(fx.get("n_big"), "fixed.n_big", 1)
        if real(fx.get("oracle_rel_tol"), "fixed.oracle_rel_tol") and fx["oracle_rel_tol"] <= 0:
            bad.append("fixed.oracle_rel_tol must be positive")
    return bad


# -- building blocks ----------------------------------------------------------

def build_env(env: dict, demand_mean: float | None = None) -> MdpModel:
    kind = env["kind"]
    gamma = env["discount"]
    if kind == "coin-toss":
        K = env.get("num_coins", 10)
        hp = env.get("head_probs", 0.5)
        probs = hp if isinstance(hp, list) else [hp] * K
        return coin_toss_env(K, probs, gamma)
    K = env.get("capacity", 10)
    costs = {k: env[k] for k in ("order_cost", "profit", "penalty", "holding") if k in env}
    if kind == "inventory-I":
        demand = None
    elif kind == "inventory-II":
        demand = state_dependent_poisson(K, env.get("demand_base", 2.0), env.get("demand_slope", 2.0))
    else:
        pmf = truncated_poisson_pmf(env["demand_mean"] if demand_mean is None else demand_mean, K)
        demand = lambda level: pmf  # noqa: E731
    return inventory_env(K, demand_pmf=demand, discount=gamma, name=kind, **costs)


def make_learner(spec: AlgorithmSpec, config: ExperimentConfig):
    sched = config.schedule
    rate = polynomial_rate(config.raw["rate"]["exponent"])
    name = spec.label()
    if spec.kind.startswith("BRQL"):
        risk = {"BRQL-VaR": VaR, "BRQL-CVaR": CVaR}.get(spec.kind)
        risk = Mean() if risk is None else risk(spec.alpha)
        return BRQLearner(risk, n_min=sched["n_min"], rate=rate,
                          max_sample_size=sched.get("max_sample_size"), name=name)
    return DRQLearner("kl" if spec.kind == "DRQL-KL" else "wasserstein", spec.delta, rate=rate, name=name)


def make_stream(kind: str, model: MdpModel, rng: np.random.Generator):
    return TrajectoryStream(model, rng) if kind == "trajectory" else CoveringStream(model, rng)


def stream_digest(data: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(data, np.int64).tobytes()).hexdigest()


class HashingStream(ReplayStream):
    """Replay that keeps a running digest of everything handed out."""

    def __init__(self, data, prefix: np.ndarray):
        super().__init__(data)
        self._h = hashlib.sha256(np.ascontiguousarray(prefix, np.int64).tobytes())

    def next_batch(self, n: int) -> np.ndarray:
        out = super().next_batch(n)
        self._h.update(np.ascontiguousarray(out, np.int64).tobytes())
        return out

    def hexdigest(self) -> str:
        return self._h.hexdigest()


def replication_seeds(config: ExperimentConfig, r: int):
    """(stream generator, per-algorithm generators) for replication ``r``."""
    root = np.random.SeedSequence(config.seed + r)
    children = root.spawn(1 + len(config.algorithms))
    return np.random.default_rng(children[0]), [np.random.default_rng(c) for c in children[1:]]


# -- results ----------------------------------------------------------------

@dataclass
class RunResult:
    """Deployed values per algorithm, shaped ``(replications, points)``."""

    axis: str
    points: list
    values: dict[str, np.ndarray]
    stream_hashes: list[str] = field(default_factory=list)
    config: ExperimentConfig | None = None

    @property
    def algorithms(self) -> list[str]:
        return list(self.values)

    def summary(self, algorithm: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return aggregate(self.values[algorithm])

    def final(self, algorithm: str) -> tuple[float, float, float]:
        m, sd, hw = self.summary(algorithm)
        return float(m[-1]), float(sd[-1]), float(hw[-1])


def aggregate(vals: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, sample sd and 95% half-width along the replication axis."""
    vals = np.asarray(vals, float)
    n = vals.shape[0]
    mean = vals.mean(axis=0)
    sd = vals.std(axis=0, ddof=1) if n > 1 else np.full(vals.shape[1:], np.nan)
    return mean, sd, Z95 * sd / math.sqrt(n)


def _replicate_streaming(config: ExperimentConfig, r: int):
    model = build_env(config.env)
    sched = config.schedule
    schedule = StageSchedule(sched["horizon"], sched["batch_size"], sched["sweeps"])
    stream_rng, alg_rngs = replication_seeds(config, r)
    n0 = sched["initial_batch"]
    data = make_stream(sched["stream"], model, stream_rng).next_batch(n0 + schedule.total_observations())
    initial, rest = data[:n0], data[n0:]
    out, digests = {}, set()
    for spec, rng in zip(config.algorithms, alg_rngs):
        stream = HashingStream(rest, initial)
        snaps = make_learner(spec, config).run(model, schedule, stream, rng, initial_batch=initial)
        digests.add(stream.hexdigest())
        out[spec.label()] = np.array([s.deployed_mean() for s in snaps])
    if len(digests) != 1:
        raise RuntimeError(f"replication {r}: algorithms consumed different observation streams")
    return digests.pop(), out


def fixed_data_q(spec: AlgorithmSpec, model: MdpModel, data: np.ndarray, rng: np.random.Generator,
                 n_big: int, rel_tol: float) -> np.ndarray:
    """Converged Q for one algorithm given only the historical ``data``."""
    tol = rel_tol * model.value_bound
    if spec.kind.startswith("DRQL"):
        kind = "kl" if spec.kind == "DRQL-KL" else "wasserstein"
        return robust_value_iteration(model, empirical_kernel(model, data), kind, spec.delta, tol=tol)
    posterior = init_uniform_prior(model).update(data)
    if spec.kind == "BRQL-mean":
        return value_iteration(model.with_transitions(posterior.mean()), tol=tol)
    risk = VaR(spec.alpha) if spec.kind == "BRQL-VaR" else CVaR(spec.alpha)
    return brmdp_fixed_point(posterior, risk, model, n_big=n_big, tol=tol, rng=rng)


def _replicate_fixed(config: ExperimentConfig, r: int):
    env = config.env
    model = build_env(env)
    shifted = [build_env(env, demand_mean=m) for m in config.fixed["shift_means"]]
    stream_rng, alg_rngs = replication_seeds(config, r)
    data = make_stream(config.schedule["stream"], model, stream_rng).next_batch(config.schedule["initial_batch"])
    out = {}
    for spec, rng in zip(config.algorithms, alg_rngs):
        q = fixed_data_q(spec, model, data, rng, config.fixed["n_big"], config.fixed["oracle_rel_tol"])
        policy = greedy_policy(q, model)
        out[spec.label()] = np.array([policy_evaluation_exact(m, policy).mean() for m in shifted])
    return stream_digest(data), out


def _dispatch(worker, config: ExperimentConfig, threads: int | None):
    threads = config.threads if threads is None else threads
    reps = range(config.replications)
    if threads <= 1:
        return [worker(config, r) for r in reps]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, [config] * len(reps), reps))


def _collect(axis, points, results, config) -> RunResult:
    hashes = [h for h, _ in results]
    values = {spec.label(): np.array([res[spec.label()] for _, res in results])
              for spec in config.algorithms}
    return RunResult(axis, points, values, hashes, config)


def run_experiment(config: ExperimentConfig, threads: int | None = None) -> RunResult:
    """Streaming-curve experiment; replication ``r`` is seeded by ``seed + r``."""
    if config.mode != "streaming-curve":
        raise ConfigError([f"run_experiment needs mode 'streaming-curve', got {config.mode!r}"])
    results = _dispatch(_replicate_streaming, config, threads)
    return _collect("stage", list(range(config.schedule["horizon"] + 1)), results, config)


def run_fixed_data_experiment(config: ExperimentConfig, threads: int | None = None) -> RunResult:
    """Learn once from a fixed dataset, deploy under each shifted demand mean."""
    if config.mode != "fixed-data-shift":
        raise ConfigError([f"run_fixed_data_experiment needs mode 'fixed-data-shift', got {config.mode!r}"])
    results = _dispatch(_replicate_fixed, config, threads)
    return _collect("demand_mean", list(config.fixed["shift_means"]), results, config)


# -- outputs ----------------------------------------------------------------

def curves_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["algorithm", result.axis, "mean", "sd", "ci_half_width", "replications"])
    for alg, vals in result.values.items():
        mean, sd, hw = aggregate(vals)
        for i, x in enumerate(result.points):
            w.writerow([alg, repr(x), repr(float(mean[i])), repr(float(sd[i])), repr(float(hw[i])), vals.shape[0]])
    return buf.getvalue()


def raw_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["algorithm", "replication", result.axis, "value", "stream_sha256"])
    for alg, vals in result.values.items():
        for r in range(vals.shape[0]):
            for i, x in enumerate(result.points):
                w.writerow([alg, r, repr(x), repr(float(vals[r, i])), result.stream_hashes[r]])
    return buf.getvalue()


def read_curves(text: str) -> dict[str, dict[str, np.ndarray]]:
    """Parse ``curves.csv`` back into per-algorithm columns."""
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    out: dict[str, dict[str, list]] = {}
    for row in body:
        d = out.setdefault(row[0], {k: [] for k in header[1:]})
        for k, v in zip(header[1:], row[1:]):
            d[k].append(float(v))
    return {alg: {k: np.array(v) for k, v in cols.items()} for alg, cols in out.items()}


def read_raw(text: str) -> dict[str, np.ndarray]:
    """Parse ``raw.csv`` back into ``(replications, points)`` arrays."""
    rows = list(csv.reader(io.StringIO(text)))[1:]
    cells: dict[str, dict[tuple[int, int], float]] = {}
    points: dict[str, list] = {}
    for alg, rep, x, v, _ in rows:
        pts = points.setdefault(alg, [])
        if x not in pts:
            pts.append(x)
        cells.setdefault(alg, {})[(int(rep), pts.index(x))] = float(v)
    out = {}
    for alg, c in cells.items():
        R = 1 + max(r for r, _ in c)
        arr = np.empty((R, len(points[alg])))
        for (r, i), v in c.items():
            arr[r, i] = v
        out[alg] = arr
    return out


def curves_svg(result: RunResult) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "brql", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        x = np.asarray(result.points, float)
        for alg, vals in result.values.items():
            mean, _, hw = aggregate(vals)
            line, = ax.plot(x, mean, label=alg, lw=1.5)
            if vals.shape[0] > 1:
                ax.fill_between(x, mean - hw, mean + hw, color=line.get_color(), alpha=0.2, lw=0)
        ax.set_xlabel("time stage" if result.axis == "stage" else "Poisson demand mean")
        ax.set_ylabel("deployed value")
        if result.values:
            ax.legend(frameon=False)
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def emit_outputs(result: RunResult, out_dir: str | os.PathLike) -> dict[str, Path]:
    out = Path(out_dir)
    files = {
        "curves.csv": curves_csv(result),
        "raw.csv": raw_csv(result),
        "curves.svg": curves_svg(result),
        "config.echo": "" if result.config is None else result.config.to_toml(),
    }
    paths = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            path = out / name
            path.write_text(text)
            paths[name] = path
    except OSError as exc:
        raise OSError(f"could not write outputs under {out}: {exc}") from exc
    return paths
