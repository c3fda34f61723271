"""REINFORCE training on the two-pair link, plus curvature probing.

A task-specific policy is trained by vanilla score-function policy
gradient with a mean-return baseline. After training, the local
curvature of the return surface around the trained weights is estimated
by central finite differences of the gradient estimator under common
random numbers, then projected to the PSD cone. That curvature matrix is
what the lifelong module uses to weight its encoding loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_rng, check_scalar, check_vector
from .env import (ACTION_DIM, ControlAction, SystemConfig, SystemState,
                  TaskProfile, TwoPairEnv, project_action)
from .exceptions import DivergenceError
from .policy import (FeatureMap, N_FEATURES, POLICY_DIM, PolicyParams,
                     policy_mean, sample_action)

OBJECTIVES = ("average", "discounted")
BASELINES = ("mean", "none")


@dataclass(frozen=True)
class RLHyperparams:
    """Knobs for the policy-gradient trainer.

    ``objective`` picks the per-trajectory weight used in the gradient:
    the undiscounted per-slot average, or the discounted sum with factor
    ``discount``. Learning curves always log the undiscounted average so
    they stay comparable across objectives and against the per-slot
    controller baseline. ``baseline`` subtracts the batch mean weight
    ("mean") or nothing ("none").
    """

    learning_rate: float = 1e-2
    n_trajectories: int = 8
    horizon: int = 500
    log_std: float = math.log(0.5)
    objective: str = "average"
    discount: float = 0.99
    baseline: str = "mean"
    divergence_bound: float = 1e3

    def __post_init__(self):
        check_scalar("learning_rate", self.learning_rate, minimum=0.0)
        if not isinstance(self.n_trajectories, int) or self.n_trajectories < 1:
            raise ValueError(f"n_trajectories must be a positive int, got {self.n_trajectories}")
        if not isinstance(self.horizon, int) or self.horizon < 1:
            raise ValueError(f"horizon must be a positive int, got {self.horizon}")
        check_scalar("log_std", self.log_std)
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        check_scalar("discount", self.discount, minimum=0.0, maximum=1.0)
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        check_scalar("divergence_bound", self.divergence_bound, minimum=0.0, strict_min=True)


@dataclass
class Trajectory:
    """One rollout: per-slot states (at decision time), features, raw
    actions, rewards, and optional seed metadata. ``len()`` is the horizon."""

    states: np.ndarray        # (T, STATE_DIM)
    features: np.ndarray      # (T, n_features)
    raw_actions: np.ndarray   # (T, n_action)
    rewards: np.ndarray       # (T,)
    seed: int | None = None

    def __len__(self) -> int:
        return self.rewards.shape[0]


def rollout(weights, log_std, task: TaskProfile, cfg: SystemConfig,
            horizon: int, rng, feature_map: FeatureMap | None = None) -> Trajectory:
    """Simulate ``horizon`` env steps under the linear-Gaussian policy.

    One RNG stream drives everything, in this order per step: the action
    noise draw, then the env's arrival and fading draws. If ``rng`` is an
    int it is recorded as seed metadata on the trajectory.
    """
    seed_info = rng if isinstance(rng, (int, np.integer)) else None
    rng = check_rng(rng)
    weights = check_vector("weights", weights, size=POLICY_DIM)
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    fm = feature_map if feature_map is not None else FeatureMap.for_task(task, cfg)
    std = math.exp(log_std)

    weight_mat = weights.reshape(ACTION_DIM, N_FEATURES)
    states = np.empty((horizon, 6))
    features = np.empty((horizon, N_FEATURES))
    raw_actions = np.empty((horizon, ACTION_DIM))
    rewards = np.empty(horizon)

    env = TwoPairEnv(task, cfg, rng)
    state = env.reset()
    for t in range(horizon):
        f = fm.transform(state)
        raw = weight_mat @ f + std * rng.standard_normal(ACTION_DIM)
        outcome = env.step(project_action(raw, cfg))
        states[t] = state.as_array()
        features[t] = f
        raw_actions[t] = raw
        rewards[t] = outcome.reward
        state = outcome.state
    return Trajectory(states=states, features=features,
                      raw_actions=raw_actions, rewards=rewards,
                      seed=int(seed_info) if seed_info is not None else None)


def trajectory_return(traj: Trajectory) -> float:
    """Undiscounted per-slot average reward of one trajectory."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    return float(np.mean(traj.rewards))


def discounted_return(traj: Trajectory, discount: float) -> float:
    """Discounted reward sum of one trajectory."""
    t = np.arange(len(traj))
    return float(np.sum(traj.rewards * discount ** t))


@dataclass(frozen=True)
class GradientEstimate:
    """A batch policy-gradient estimate.

    ``mean_return`` is the batch mean of the undiscounted per-slot
    average (the learning-curve value at these weights); ``baseline`` is
    the value actually subtracted inside the estimator, which lives in
    objective units.
    """

    gradient: np.ndarray
    mean_return: float
    baseline: float
    n_trajectories: int


def _score_sum(weights: np.ndarray, traj: Trajectory, log_std: float) -> np.ndarray:
    """Sum over slots of the log-density gradient, vectorised over the
    trajectory (equivalent to summing per-slot ``log_prob_grad``)."""
    n_feat = traj.features.shape[1]
    means = traj.features @ weights.reshape(-1, n_feat).T
    resid = (traj.raw_actions - means) / math.exp(2.0 * log_std)
    return (resid.T @ traj.features).ravel()


def estimate_policy_gradient(weights, task, cfg, hp: RLHyperparams, rng,
                             rollout_fn=None) -> GradientEstimate:
    """Score-function gradient estimate from ``hp.n_trajectories`` rollouts.

    ``rollout_fn(weights, rng) -> Trajectory`` replaces the env rollout
    when given (synthetic problems, cached batches); it must draw all its
    randomness from the passed generator so that common-random-number
    callers stay deterministic. ``task`` and ``cfg`` may then be None.
    """
    rng = check_rng(rng)
    weights = np.asarray(weights, dtype=np.float64)
    if rollout_fn is None:
        fm = FeatureMap.for_task(task, cfg)

        def rollout_fn(w, r):
            return rollout(w, hp.log_std, task, cfg, hp.horizon, r, feature_map=fm)

    trajs = [rollout_fn(weights, rng) for _ in range(hp.n_trajectories)]
    avg_returns = np.array([trajectory_return(t) for t in trajs])
    if hp.objective == "average":
        objective_weights = avg_returns
    else:
        objective_weights = np.array([discounted_return(t, hp.discount) for t in trajs])

    baseline = float(np.mean(objective_weights)) if hp.baseline == "mean" else 0.0
    grad = np.zeros_like(weights)
    for traj, w in zip(trajs, objective_weights):
        grad += (w - baseline) * _score_sum(weights, traj, hp.log_std)
    grad /= hp.n_trajectories
    return GradientEstimate(gradient=grad, mean_return=float(np.mean(avg_returns)),
                            baseline=baseline, n_trajectories=hp.n_trajectories)


def train_task(weights_init, task, cfg, n_iterations: int, hp: RLHyperparams,
               rng, rollout_fn=None, callback=None) -> tuple[PolicyParams, np.ndarray]:
    """Run ``n_iterations`` ascent updates from ``weights_init``.

    Returns the final policy and the learning curve: one undiscounted
    mean return per iteration, measured at the weights *before* that
    iteration's update. A zero learning rate still records the curve.
    Raises :class:`DivergenceError` when any weight leaves
    ``[-divergence_bound, divergence_bound]``.
    """
    rng = check_rng(rng)
    weights = check_vector("weights_init", weights_init).copy()
    if n_iterations < 0:
        raise ValueError(f"n_iterations must be >= 0, got {n_iterations}")
    curve = np.empty(n_iterations)
    for i in range(n_iterations):
        est = estimate_policy_gradient(weights, task, cfg, hp, rng, rollout_fn=rollout_fn)
        curve[i] = est.mean_return
        weights += hp.learning_rate * est.gradient
        top = float(np.max(np.abs(weights)))
        if top > hp.divergence_bound:
            raise DivergenceError(
                f"policy weights reached magnitude {top:.3g} at iteration {i} "
                f"(bound {hp.divergence_bound:.3g})",
                iteration=i, weight_norm=top)
        if callback is not None:
            callback(i, est, weights)
    log_std = np.full(ACTION_DIM, hp.log_std)
    return PolicyParams(weights=weights, log_std=log_std), curve


@dataclass(frozen=True)
class CurvatureEstimate:
    """Symmetric PSD curvature of the return surface at trained weights.

    ``psd_projected`` records whether eigenvalue clamping at the floor
    actually changed the matrix.
    """

    matrix: np.ndarray
    psd_projected: bool
    epsilon: float


def finite_difference_curvature(grad_fn, weights, epsilon: float = 1e-4,
                                psd_floor: float = 1e-6) -> CurvatureEstimate:
    """Negated symmetrised Jacobian of ``grad_fn`` by central differences,
    eigenvalue-clamped to be PSD.

    ``grad_fn`` must be deterministic (fix its randomness before calling);
    otherwise difference noise swamps the signal at small ``epsilon``.
    """
    weights = check_vector("weights", weights)
    check_scalar("epsilon", epsilon, minimum=0.0, strict_min=True)
    check_scalar("psd_floor", psd_floor, minimum=0.0)
    d = weights.shape[0]
    jac = np.empty((d, d))
    for i in range(d):
        bump = np.zeros(d)
        bump[i] = epsilon
        jac[:, i] = (np.asarray(grad_fn(weights + bump))
                     - np.asarray(grad_fn(weights - bump))) / (2.0 * epsilon)
    curv = -0.5 * (jac + jac.T)
    eigvals, eigvecs = np.linalg.eigh(curv)
    projected = bool(np.any(eigvals < psd_floor))
    if projected:
        curv = (eigvecs * np.maximum(eigvals, psd_floor)) @ eigvecs.T
        curv = 0.5 * (curv + curv.T)
    return CurvatureEstimate(matrix=curv, psd_projected=projected, epsilon=epsilon)


def estimate_curvature(weights, task, cfg, hp: RLHyperparams, rng,
                       epsilon: float = 1e-4, psd_floor: float = 1e-6,
                       rollout_fn=None) -> CurvatureEstimate:
    """Curvature of the return surface at ``weights`` on the real task.

    All finite-difference probes reuse one frozen random stream (common
    random numbers), so the differenced function is deterministic and the
    result reproducible from ``rng``.
    """
    rng = check_rng(rng)
    crn_seed = int(rng.integers(0, 2 ** 63 - 1))

    def grad_fn(w):
        probe_rng = np.random.default_rng(crn_seed)
        return estimate_policy_gradient(w, task, cfg, hp, probe_rng,
                                        rollout_fn=rollout_fn).gradient

    return finite_difference_curvature(grad_fn, weights,
                                       epsilon=epsilon, psd_floor=psd_floor)


class PolicyGradientAgent(BaseEstimator):
    """Estimator facade over :func:`train_task` for a single task.

    Parameters are stored verbatim; fitting trains a linear-Gaussian
    policy from zero weights (or ``warm_weights`` when given) and exposes
    ``weights_``, ``log_std_``, ``curve_``, and ``feature_map_``.
    """

    def __init__(self, cfg: SystemConfig | None = None,
                 hyperparams: RLHyperparams | None = None,
                 n_iterations: int = 100,
                 warm_weights=None,
                 random_state=None):
        self.cfg = cfg
        self.hyperparams = hyperparams
        self.n_iterations = n_iterations
        self.warm_weights = warm_weights
        self.random_state = random_state

    def fit(self, task: TaskProfile, y=None):
        cfg = self.cfg if self.cfg is not None else SystemConfig()
        hp = self.hyperparams if self.hyperparams is not None else RLHyperparams()
        rng = check_rng(self.random_state)
        start = (np.zeros(POLICY_DIM) if self.warm_weights is None
                 else check_vector("warm_weights", self.warm_weights, size=POLICY_DIM))
        params, curve = train_task(start, task, cfg, self.n_iterations, hp, rng)
        self.task_ = task
        self.weights_ = params.weights
        self.log_std_ = params.log_std
        self.curve_ = curve
        self.feature_map_ = FeatureMap.for_task(task, cfg)
        self.cfg_ = cfg
        return self

    def predict(self, states) -> np.ndarray:
        """Feasible mean actions for raw state rows (n, STATE_DIM) or a
        single :class:`SystemState`; rows are (power0, time0, time1, time_eh)."""
        check_is_fitted(self)
        single = isinstance(states, SystemState)
        if single:
            states = states.as_array()
        states = np.asarray(states, dtype=np.float64)
        if states.ndim == 1:
            single = True
            states = states[None, :]
        feats = self.feature_map_.transform_batch(states)
        out = np.empty((states.shape[0], ACTION_DIM))
        for i in range(states.shape[0]):
            act = project_action(policy_mean(self.weights_, feats[i]), self.cfg_)
            out[i] = act.as_array()
        return out[0] if single else out

    def act(self, state: SystemState) -> ControlAction:
        """Feasible mean action for one state, as a :class:`ControlAction`."""
        check_is_fitted(self)
        f = self.feature_map_.transform(state)
        return project_action(policy_mean(self.weights_, f), self.cfg_)
