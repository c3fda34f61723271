"""Lifelong policy-gradient learning for energy-harvesting sensor pairs.

A small simulator for two sensor pairs sharing a time-slotted channel
(one pair also recharges a relay battery over RF), plus three ways to
control it: a policy-gradient learner trained from scratch, a lifelong
learner that factors per-task policies through a shared basis, and a
drift-plus-penalty controller that needs no training at all. The
harness wires them into a reproducible train/test protocol.
"""

from .baselines import (LyapunovConfig, LyapunovController, LyapunovTrace,
                        action_grid, lyapunov_controller, run_lyapunov,
                        surrogate_values, vanilla_rl)
from .env import (ACTION_DIM, STATE_DIM, ControlAction, StepOutcome,
                  SystemConfig, SystemState, TaskProfile, TwoPairEnv,
                  battery_update, harvested_power, make_task_schedule,
                  project_action, queue_update, reward, sample_arrivals,
                  sample_channel, step, transmitted_data)
from .exceptions import (ConvergenceError, DivergenceError, EHLearnError,
                         SnapshotFormatError, SnapshotVersionError)
from .harness import (ExperimentConfig, ExperimentResult, RunRecord,
                      convergence_iteration, default_experiment_config,
                      generate_training_tasks, load_experiment_config,
                      load_kb, report, run_experiment, save_kb, substream,
                      test_tasks, trailing_mean)
from .lifelong import (KnowledgeBase, LifelongHyperparams, LifelongLearner,
                       TaskEncoding, WarmStartResult, adapt_task, encode_task,
                       init_kb, mean_encoding, pinv, refit_kb, run_mt_l2rl,
                       task_statistics, update_statistics, warm_start)
from .policy import (N_FEATURES, POLICY_DIM, FeatureMap, PolicyParams,
                     log_prob, log_prob_grad, policy_mean, sample_action)
from .rl import (CurvatureEstimate, GradientEstimate, PolicyGradientAgent,
                 RLHyperparams, Trajectory, estimate_curvature,
                 estimate_policy_gradient, finite_difference_curvature,
                 rollout, train_task, trajectory_return)

__version__ = "0.1.0"

__all__ = [
    "ACTION_DIM", "STATE_DIM", "N_FEATURES", "POLICY_DIM",
    "ControlAction", "StepOutcome", "SystemConfig", "SystemState",
    "TaskProfile", "TwoPairEnv", "battery_update", "harvested_power",
    "make_task_schedule", "project_action", "queue_update", "reward",
    "sample_arrivals", "sample_channel", "step", "transmitted_data",
    "FeatureMap", "PolicyParams", "log_prob", "log_prob_grad",
    "policy_mean", "sample_action",
    "CurvatureEstimate", "GradientEstimate", "PolicyGradientAgent",
    "RLHyperparams", "Trajectory", "estimate_curvature",
    "estimate_policy_gradient", "finite_difference_curvature", "rollout",
    "train_task", "trajectory_return",
    "KnowledgeBase", "LifelongHyperparams", "LifelongLearner",
    "TaskEncoding", "WarmStartResult", "adapt_task", "encode_task",
    "init_kb", "mean_encoding", "pinv", "refit_kb", "run_mt_l2rl",
    "task_statistics", "update_statistics", "warm_start",
    "LyapunovConfig", "LyapunovController", "LyapunovTrace", "action_grid",
    "lyapunov_controller", "run_lyapunov", "surrogate_values", "vanilla_rl",
    "ExperimentConfig", "ExperimentResult", "RunRecord",
    "convergence_iteration", "default_experiment_config",
    "generate_training_tasks", "load_experiment_config", "load_kb",
    "report", "run_experiment", "save_kb", "substream", "test_tasks",
    "trailing_mean",
    "ConvergenceError", "DivergenceError", "EHLearnError",
    "SnapshotFormatError", "SnapshotVersionError",
    "__version__",
]
