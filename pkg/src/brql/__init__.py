"""Bayesian risk-averse Q-learning for MDPs with an unknown transition kernel."""

from .baselines import DRQLearner, drql_learner, kl_robust_target, wasserstein_robust_target
from .harness import ExperimentConfig, RunResult, emit_outputs, run_experiment, run_fixed_data_experiment
from .learner import (BRQLearner, CoveringStream, LearnerState, ReplayStream, StageSchedule,
                      TrajectoryStream, adapt_sample_sizes, brql_mean_learner, default_rate, q_sweep, run)
from .mdp import (ConvergenceError, MdpModel, coin_toss_env, exact_bellman, greedy_policy, inventory_env,
                  policy_evaluation_exact, truncated_poisson_pmf, value_iteration)
from .oracle import LimitingPosteriorSpec, brmdp_fixed_point, data_conditional_optimal, posterior_gap_bound
from .posterior import DirichletPosterior, init_uniform_prior
from .risk import CVaR, Mean, RiskFunctional, VaR, estimate_bellman, estimate_from_samples, f_eval

__version__ = "0.1.0"
