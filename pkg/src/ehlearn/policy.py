"""Linear-Gaussian control policy over normalised state features.

The policy is a single linear map from a 7-dimensional feature vector
(six scaled state variables plus a bias) to the 4 raw action
coordinates, with fixed diagonal Gaussian exploration noise. Raw actions
are projected onto the feasible set by :func:`ehlearn.env.project_action`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import check_rng, check_vector
from .env import ACTION_DIM, STATE_DIM, SystemConfig, SystemState, TaskProfile

N_FEATURES = STATE_DIM + 1
POLICY_DIM = N_FEATURES * ACTION_DIM


@dataclass(frozen=True)
class FeatureMap:
    """Per-task state normalisation: divides each state variable by a
    characteristic scale and appends a constant bias feature.

    Queue scales default to ten slots' worth of mean arrivals, the
    battery scale to capacity, and gain scales to each channel's Rayleigh
    mean, so features sit near unit magnitude under typical operation.
    """

    scales: np.ndarray  # (STATE_DIM,), all > 0

    def __post_init__(self):
        scales = check_vector("scales", self.scales, size=STATE_DIM)
        if np.any(scales <= 0.0):
            raise ValueError("feature scales must be > 0")
        scales = scales.copy()
        scales.flags.writeable = False
        object.__setattr__(self, "scales", scales)

    @classmethod
    def for_task(cls, task: TaskProfile, cfg: SystemConfig) -> "FeatureMap":
        rayleigh_mean = math.sqrt(math.pi / 2.0)
        queue_scale = max(cfg.arrival_rate_bps * cfg.slot_seconds, 1.0) * 10.0
        return cls(scales=np.array([
            queue_scale,
            queue_scale,
            cfg.battery_cap_j,
            cfg.link0_scale * rayleigh_mean,
            cfg.link1_scale * rayleigh_mean,
            task.eh_scale * rayleigh_mean,
        ]))

    def transform(self, state: SystemState) -> np.ndarray:
        """Feature vector for one state: scaled variables plus bias 1."""
        s = self.scales
        return np.array([
            state.q0_bits / s[0], state.q1_bits / s[1], state.battery_j / s[2],
            state.gain0 / s[3], state.gain1 / s[4], state.gain_eh / s[5],
            1.0,
        ])

    def transform_batch(self, states: np.ndarray) -> np.ndarray:
        """Features for an (n, STATE_DIM) array of raw state rows."""
        states = np.asarray(states, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != STATE_DIM:
            raise ValueError(f"expected (n, {STATE_DIM}) states, got {states.shape}")
        out = np.empty((states.shape[0], N_FEATURES))
        out[:, :STATE_DIM] = states / self.scales
        out[:, STATE_DIM] = 1.0
        return out


@dataclass(frozen=True)
class PolicyParams:
    """Flat policy weight vector plus per-coordinate log standard deviations.

    The two-pair system policy has ``POLICY_DIM`` weights and
    ``ACTION_DIM`` noise coordinates; the container itself accepts any
    sizes so the trainer also serves synthetic low-dimensional problems.
    """

    weights: np.ndarray   # (POLICY_DIM,) for the system policy
    log_std: np.ndarray   # (ACTION_DIM,), -inf allowed (deterministic limit)

    def __post_init__(self):
        weights = check_vector("weights", self.weights)
        log_std = np.asarray(self.log_std, dtype=np.float64)
        if log_std.ndim != 1 or log_std.shape[0] < 1:
            raise ValueError(f"log_std must be a non-empty 1-D array, got shape {log_std.shape}")
        if np.any(np.isnan(log_std)) or np.any(log_std == np.inf):
            raise ValueError("log_std must not contain NaN or +inf")
        weights = weights.copy()
        weights.flags.writeable = False
        log_std = log_std.copy()
        log_std.flags.writeable = False
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "log_std", log_std)


def _check_weights(weights, features) -> tuple[np.ndarray, np.ndarray, int]:
    weights = np.asarray(weights, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if weights.ndim != 1 or features.ndim != 1:
        raise ValueError("weights and features must be 1-D")
    n_feat = features.shape[0]
    if n_feat == 0 or weights.shape[0] % n_feat != 0:
        raise ValueError(
            f"weight length {weights.shape[0]} is not a multiple of "
            f"feature length {n_feat}"
        )
    return weights, features, weights.shape[0] // n_feat


def policy_mean(weights, features) -> np.ndarray:
    """Mean raw action: the weight matrix (reshaped row-major, one row per
    action coordinate) applied to the feature vector."""
    weights, features, n_act = _check_weights(weights, features)
    return weights.reshape(n_act, features.shape[0]) @ features


def sample_action(weights, features, log_std, rng) -> np.ndarray:
    """Draw a raw action: mean plus diagonal Gaussian noise.

    One ``standard_normal`` call of the action dimension; ``log_std`` of
    -inf gives exactly the mean (deterministic limit).
    """
    rng = check_rng(rng)
    mean = policy_mean(weights, features)
    std = np.exp(np.asarray(log_std, dtype=np.float64))
    return mean + std * rng.standard_normal(mean.shape[0])


def log_prob(weights, features, raw_action, log_std) -> float:
    """Gaussian log density of a raw action under the policy."""
    mean = policy_mean(weights, features)
    log_std = np.asarray(log_std, dtype=np.float64)
    raw_action = np.asarray(raw_action, dtype=np.float64)
    z = (raw_action - mean) / np.exp(log_std)
    return float(-0.5 * z @ z - log_std.sum()
                 - 0.5 * mean.shape[0] * math.log(2.0 * math.pi))


def log_prob_grad(weights, features, raw_action, log_std) -> np.ndarray:
    """Score function: gradient of the log density with respect to the
    flat weight vector, ``outer((a - mean) / std^2, features)`` flattened
    row-major to match the weight layout."""
    mean = policy_mean(weights, features)
    log_std = np.asarray(log_std, dtype=np.float64)
    raw_action = np.asarray(raw_action, dtype=np.float64)
    resid = (raw_action - mean) / np.exp(2.0 * log_std)
    return np.outer(resid, np.asarray(features, dtype=np.float64)).ravel()
