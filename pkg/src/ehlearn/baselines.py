"""Comparison methods: cold-start policy gradient and a model-based
drift-plus-penalty controller.

The drift controller needs no training: each slot it scans a feasible
action grid and picks the action minimising a one-slot surrogate that
trades average power against queue drift and battery drift toward a
target level. Rewards on its trace come from the exact same env step
used by the learned policies, so curves are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_rng, check_scalar, check_vector
from .env import (ControlAction, SystemConfig, SystemState, TaskProfile,
                  TwoPairEnv, harvested_power, transmitted_data)
from .policy import PolicyParams, POLICY_DIM
from .rl import RLHyperparams, train_task


def vanilla_rl(task: TaskProfile, cfg: SystemConfig, n_iterations: int,
               hp: RLHyperparams, rng, rollout_fn=None) -> tuple[PolicyParams, np.ndarray]:
    """Cold-start policy gradient: :func:`ehlearn.rl.train_task` from zero
    weights, no transfer. Returns the final policy and its learning curve."""
    return train_task(np.zeros(POLICY_DIM), task, cfg, n_iterations, hp, rng,
                      rollout_fn=rollout_fn)


@dataclass(frozen=True)
class LyapunovConfig:
    """Drift-plus-penalty controller knobs.

    ``penalty_weight`` is the weight on average power in the surrogate
    (None resolves to ten times battery capacity); ``battery_target`` is
    the level the battery drift is steered toward (None resolves to half
    capacity). ``grid_power`` and ``grid_time`` set the per-axis grid
    resolution.
    """

    penalty_weight: float | None = None
    battery_target: float | None = None
    grid_power: int = 9
    grid_time: int = 9

    def __post_init__(self):
        if self.penalty_weight is not None:
            check_scalar("penalty_weight", self.penalty_weight,
                         minimum=0.0, strict_min=True)
        if self.battery_target is not None:
            check_scalar("battery_target", self.battery_target, minimum=0.0)
        for name, value in (("grid_power", self.grid_power),
                            ("grid_time", self.grid_time)):
            if not isinstance(value, int) or value < 2:
                raise ValueError(f"{name} must be an int >= 2, got {value}")

    def resolve(self, cfg: SystemConfig) -> tuple[float, float]:
        """Concrete (penalty_weight, battery_target) for a given system."""
        weight = (self.penalty_weight if self.penalty_weight is not None
                  else 10.0 * cfg.battery_cap_j)
        target = (self.battery_target if self.battery_target is not None
                  else 0.5 * cfg.battery_cap_j)
        return weight, target


def action_grid(cfg: SystemConfig, lyap: LyapunovConfig) -> np.ndarray:
    """All feasible grid actions, rows (power0, time0, time1, time_eh),
    ordered lexicographically. Power spans [0, p0_max]; each time axis
    spans [0, 1] and triples with fraction sum above 1 are dropped."""
    powers = np.linspace(0.0, cfg.p0_max_w, lyap.grid_power)
    times = np.linspace(0.0, 1.0, lyap.grid_time)
    t0, t1, te = np.meshgrid(times, times, times, indexing="ij")
    triples = np.stack([t0.ravel(), t1.ravel(), te.ravel()], axis=1)
    triples = triples[triples.sum(axis=1) <= 1.0 + 1e-12]
    n_p, n_t = powers.shape[0], triples.shape[0]
    grid = np.empty((n_p * n_t, 4))
    grid[:, 0] = np.repeat(powers, n_t)
    grid[:, 1:] = np.tile(triples, (n_p, 1))
    return grid


def surrogate_values(state: SystemState, task: TaskProfile, cfg: SystemConfig,
                     lyap: LyapunovConfig, grid: np.ndarray) -> np.ndarray:
    """One-slot drift-plus-penalty value of every grid action.

    Weighted average power, minus backlog-weighted service rates, minus
    the battery drift credit toward the target level. Rate and harvest
    terms evaluate the env's own ops on the whole grid.
    """
    weight, target = lyap.resolve(cfg)
    slot = cfg.slot_seconds
    p0, time0, time1, time_eh = grid[:, 0], grid[:, 1], grid[:, 2], grid[:, 3]
    rate0 = transmitted_data(p0, state.gain0, time0, cfg)
    rate1 = transmitted_data(cfg.p1_w, state.gain1, time1, cfg)
    harvest_j = harvested_power(p0, state.gain_eh, task, cfg) * time_eh * slot
    spend_j = cfg.p1_w * time1 * slot
    energy = p0 * time0 + cfg.p1_w * time1
    return (weight * energy
            - state.q0_bits * rate0
            - state.q1_bits * rate1
            - (target - state.battery_j) * (harvest_j - spend_j))


def _select_row(values: np.ndarray, grid: np.ndarray, cfg: SystemConfig) -> int:
    """Index of the minimising grid row; exact-value ties go to the lower
    energy action, then the lexicographically smallest one."""
    energy = grid[:, 0] * grid[:, 1] + cfg.p1_w * grid[:, 2]
    order = np.lexsort((grid[:, 3], grid[:, 2], grid[:, 1], grid[:, 0],
                        energy, values))
    return int(order[0])


def lyapunov_controller(state: SystemState, task: TaskProfile, cfg: SystemConfig,
                        lyap: LyapunovConfig | None = None,
                        grid: np.ndarray | None = None) -> ControlAction:
    """Greedy drift-plus-penalty action for one slot.

    The returned action attains the exact minimum surrogate value over
    the grid (re-scannable via :func:`surrogate_values`).
    """
    lyap = lyap if lyap is not None else LyapunovConfig()
    if grid is None:
        grid = action_grid(cfg, lyap)
    values = surrogate_values(state, task, cfg, lyap, grid)
    row = grid[_select_row(values, grid, cfg)]
    return ControlAction(float(row[0]), float(row[1]), float(row[2]), float(row[3]))


@dataclass
class LyapunovTrace:
    """One controller episode: per-slot decision states, actions, rewards."""

    states: np.ndarray   # (T, STATE_DIM)
    actions: np.ndarray  # (T, 4)
    rewards: np.ndarray  # (T,)

    def __len__(self) -> int:
        return self.rewards.shape[0]

    def mean_return(self) -> float:
        return float(np.mean(self.rewards))


def run_lyapunov(task: TaskProfile, cfg: SystemConfig,
                 lyap: LyapunovConfig | None = None, horizon: int = 500,
                 rng=None) -> LyapunovTrace:
    """Drive the env with the drift controller for ``horizon`` slots.

    Rewards come from the env step itself (identical reward
    implementation as the learned policies' rollouts).
    """
    lyap = lyap if lyap is not None else LyapunovConfig()
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    rng = check_rng(rng)
    grid = action_grid(cfg, lyap)
    env = TwoPairEnv(task, cfg, rng)
    state = env.reset()
    states = np.empty((horizon, 6))
    actions = np.empty((horizon, 4))
    rewards = np.empty(horizon)
    for t in range(horizon):
        action = lyapunov_controller(state, task, cfg, lyap, grid=grid)
        outcome = env.step(action)
        states[t] = state.as_array()
        actions[t] = action.as_array()
        rewards[t] = outcome.reward
        state = outcome.state
    return LyapunovTrace(states=states, actions=actions, rewards=rewards)


class LyapunovController(BaseEstimator):
    """Estimator facade for the drift controller: ``fit`` binds a task and
    precomputes the action grid, ``predict`` maps states to grid actions."""

    def __init__(self, cfg: SystemConfig | None = None,
                 lyapunov: LyapunovConfig | None = None):
        self.cfg = cfg
        self.lyapunov = lyapunov

    def fit(self, task: TaskProfile, y=None):
        self.cfg_ = self.cfg if self.cfg is not None else SystemConfig()
        self.lyapunov_ = self.lyapunov if self.lyapunov is not None else LyapunovConfig()
        self.task_ = task
        self.grid_ = action_grid(self.cfg_, self.lyapunov_)
        return self

    def act(self, state: SystemState) -> ControlAction:
        check_is_fitted(self)
        return lyapunov_controller(state, self.task_, self.cfg_,
                                   self.lyapunov_, grid=self.grid_)

    def predict(self, states) -> np.ndarray:
        """Grid actions for raw state rows (n, STATE_DIM) or one
        :class:`SystemState`; rows are (power0, time0, time1, time_eh)."""
        check_is_fitted(self)
        if isinstance(states, SystemState):
            return self.act(states).as_array()
        states = np.asarray(states, dtype=np.float64)
        single = states.ndim == 1
        if single:
            states = states[None, :]
        out = np.empty((states.shape[0], 4))
        for i, row in enumerate(states):
            row = check_vector("state", row, size=6)
            state = SystemState(q0_bits=row[0], q1_bits=row[1], battery_j=row[2],
                                gain0=row[3], gain1=row[4], gain_eh=row[5])
            out[i] = self.act(state).as_array()
        return out[0] if single else out
