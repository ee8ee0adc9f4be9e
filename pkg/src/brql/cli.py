"""Command-line entry point: ``brql {run,fixed,solve,bound,dump-env}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import (ConfigError, ExperimentConfig, build_env, emit_outputs, make_stream,
                      run_experiment, run_fixed_data_experiment)
from .mdp import ConvergenceError, dump_kernel, dump_q
from .oracle import LimitingPosteriorSpec, brmdp_fixed_point, posterior_gap_bound
from .posterior import init_uniform_prior
from .risk import CVaR, Mean, VaR

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _load(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError(["pass either --config or --preset, not both"])
    if args.config:
        cfg = ExperimentConfig.from_toml(args.config)
    else:
        cfg = ExperimentConfig.preset(args.preset or "coin-a02")
    return cfg.override(seed=args.seed, replications=getattr(args, "replications", None),
                        threads=getattr(args, "threads", None))


def _experiment(args, fixed: bool) -> int:
    cfg = _load(args)
    if fixed and cfg.mode != "fixed-data-shift":
        cfg = cfg.override(mode="fixed-data-shift")
    result = run_fixed_data_experiment(cfg) if fixed else run_experiment(cfg)
    paths = emit_outputs(result, args.out)
    for alg in result.algorithms:
        m, _, hw = result.final(alg)
        print(f"{alg:>18s}  final mean {m: .4f} ± {hw:.4f}")
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def _solve(args) -> int:
    cfg = _load(args)
    model = build_env(cfg.env)
    rng_stream, rng_oracle = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    if args.dirac:
        spec = LimitingPosteriorSpec.all_dirac(model)
    else:
        n0 = cfg.schedule["initial_batch"] if args.observations is None else args.observations
        data = make_stream(cfg.schedule["stream"], model, rng_stream).next_batch(n0)
        spec = LimitingPosteriorSpec.from_posterior(init_uniform_prior(model).update(data))
    risk = {"var": lambda: VaR(args.alpha), "cvar": lambda: CVaR(args.alpha), "mean": Mean}[args.risk]()
    tol = None if args.tol is None else args.tol * model.value_bound
    q = brmdp_fixed_point(spec, risk, model, n_big=args.n_big, tol=tol, rng=rng_oracle,
                          max_iter=args.max_iter)
    text = dump_q(model, q)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _bound(args) -> int:
    if not 0 < args.alpha < 1:
        raise ConfigError(["--alpha must lie in (0, 1)"])
    if args.o_min < 1:
        raise ConfigError(["--o-min must be at least 1"])
    floor, bound = posterior_gap_bound(args.o_min, args.states, args.alpha, args.r_bar, args.gamma)
    note = "  (vacuous)" if floor <= 0 else ""
    print(f"probability_floor {floor!r}{note}")
    print(f"sup_norm_bound {bound!r}")
    return EXIT_OK


def _dump_env(args) -> int:
    text = dump_kernel(build_env(_load(args).env))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brql", description="Bayesian risk-averse Q-learning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p, with_reps=True):
        p.add_argument("--config", type=Path, help="TOML experiment config")
        p.add_argument("--preset", help="named config: coin-a02, coin-a04, inventory-stream, inventory-fixed")
        p.add_argument("--seed", type=int, help="base seed (replication r uses seed + r)")
        if with_reps:
            p.add_argument("--replications", type=int)
            p.add_argument("--threads", type=int, help="worker processes for replications")

    for name, fixed in (("run", False), ("fixed", True)):
        p = sub.add_parser(name, help="fixed-data shift experiment" if fixed else "streaming-curve experiment")
        config_args(p)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.set_defaults(func=lambda a, fixed=fixed: _experiment(a, fixed))

    p = sub.add_parser("solve", help="oracle fixed point under the posterior after n(0) observations")
    config_args(p, with_reps=False)
    p.add_argument("--risk", choices=("var", "cvar", "mean"), default="var")
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--n-big", type=int, default=20000)
    p.add_argument("--tol", type=float, help="tolerance relative to R/(1-gamma)")
    p.add_argument("--observations", type=int, help="override n(0)")
    p.add_argument("--dirac", action="store_true", help="use the true kernel at every pair")
    p.add_argument("--max-iter", type=int, default=10**6)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_solve)

    p = sub.add_parser("bound", help="finite-data gap bound between posterior-risk and true values")
    p.add_argument("--o-min", type=int, required=True)
    p.add_argument("--states", type=int, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--r-bar", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.95)
    p.set_defaults(func=_bound)

    p = sub.add_parser("dump-env", help="print the true kernel and rewards")
    config_args(p, with_reps=False)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_dump_env)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
