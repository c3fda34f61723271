import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ehlearn.env import SystemConfig, SystemState, TaskProfile
from ehlearn.policy import (ACTION_DIM, N_FEATURES, POLICY_DIM, FeatureMap,
                            PolicyParams, log_prob, log_prob_grad,
                            policy_mean, sample_action)

CFG = SystemConfig()
TASK = TaskProfile(task_id=0, eh_scale=1.2, conversion_efficiency=0.4)


def test_feature_map_scales_for_task():
    fm = FeatureMap.for_task(TASK, CFG)
    rayleigh_mean = math.sqrt(math.pi / 2.0)
    assert fm.scales[0] == pytest.approx(1e4)  # ten slots of 1 kb arrivals
    assert fm.scales[2] == pytest.approx(5.0)
    assert fm.scales[5] == pytest.approx(1.2 * rayleigh_mean)


def test_feature_transform_appends_bias():
    fm = FeatureMap(scales=np.array([2.0, 4.0, 5.0, 1.0, 1.0, 0.5]))
    state = SystemState(q0_bits=4.0, q1_bits=8.0, battery_j=2.5,
                        gain0=1.0, gain1=3.0, gain_eh=1.5)
    feats = fm.transform(state)
    assert feats.shape == (N_FEATURES,)
    assert feats.tolist() == [2.0, 2.0, 0.5, 1.0, 3.0, 3.0, 1.0]


def test_feature_transform_batch_matches_single():
    fm = FeatureMap.for_task(TASK, CFG)
    states = np.abs(np.random.default_rng(0).normal(size=(5, 6))) + 0.1
    batch = fm.transform_batch(states)
    for row, raw in zip(batch, states):
        state = SystemState(*raw)
        assert np.allclose(row, fm.transform(state))


def test_feature_map_rejects_nonpositive_scales():
    with pytest.raises(ValueError):
        FeatureMap(scales=np.array([1.0, 1.0, 0.0, 1.0, 1.0, 1.0]))


def test_policy_mean_matches_hand_matvec():
    rng = np.random.default_rng(1)
    weights = rng.normal(size=POLICY_DIM)
    features = rng.normal(size=N_FEATURES)
    got = policy_mean(weights, features)
    want = weights.reshape(ACTION_DIM, N_FEATURES) @ features
    assert np.allclose(got, want)
    # spot-check one coordinate fully by hand
    assert got[2] == pytest.approx(
        float(weights[2 * N_FEATURES:3 * N_FEATURES] @ features))


def test_policy_mean_rejects_misaligned_shapes():
    with pytest.raises(ValueError):
        policy_mean(np.zeros(27), np.zeros(N_FEATURES))
    with pytest.raises(ValueError):
        policy_mean(np.zeros((4, 7)), np.zeros(N_FEATURES))


def test_sample_action_deterministic_limit():
    rng = np.random.default_rng(2)
    weights = rng.normal(size=POLICY_DIM)
    features = rng.normal(size=N_FEATURES)
    raw = sample_action(weights, features, np.full(ACTION_DIM, -np.inf),
                        np.random.default_rng(0))
    assert np.allclose(raw, policy_mean(weights, features))


def test_sample_action_moments():
    weights = np.zeros(POLICY_DIM)
    features = np.zeros(N_FEATURES)
    log_std = np.log([0.5, 1.0, 2.0, 0.1])
    rng = np.random.default_rng(3)
    draws = np.array([sample_action(weights, features, log_std, rng)
                      for _ in range(20_000)])
    assert np.allclose(draws.mean(axis=0), 0.0, atol=0.05)
    assert np.allclose(draws.std(axis=0), [0.5, 1.0, 2.0, 0.1], rtol=0.05)


def test_log_prob_matches_direct_gaussian_density():
    rng = np.random.default_rng(4)
    weights = rng.normal(size=POLICY_DIM)
    features = rng.normal(size=N_FEATURES)
    log_std = np.array([-0.5, 0.0, 0.3, -1.0])
    raw = rng.normal(size=ACTION_DIM)
    mean = policy_mean(weights, features)
    std = np.exp(log_std)
    want = sum(
        -0.5 * ((raw[i] - mean[i]) / std[i]) ** 2
        - math.log(std[i]) - 0.5 * math.log(2 * math.pi)
        for i in range(ACTION_DIM))
    assert log_prob(weights, features, raw, log_std) == pytest.approx(want)


def test_log_prob_grad_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(20):
        weights = rng.normal(size=POLICY_DIM)
        features = rng.normal(size=N_FEATURES)
        log_std = rng.normal(size=ACTION_DIM) * 0.3
        raw = rng.normal(size=ACTION_DIM)
        grad = log_prob_grad(weights, features, raw, log_std)
        eps = 1e-6
        for k in rng.choice(POLICY_DIM, size=6, replace=False):
            bumped = weights.copy()
            bumped[k] += eps
            dipped = weights.copy()
            dipped[k] -= eps
            fd = (log_prob(bumped, features, raw, log_std)
                  - log_prob(dipped, features, raw, log_std)) / (2 * eps)
            assert grad[k] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_score_function_has_zero_mean():
    # E[grad log pi(a)] = 0 under a ~ pi: the identity REINFORCE rests on
    rng = np.random.default_rng(6)
    weights = rng.normal(size=POLICY_DIM)
    features = rng.normal(size=N_FEATURES)
    log_std = np.zeros(ACTION_DIM)
    total = np.zeros(POLICY_DIM)
    n = 40_000
    for _ in range(n):
        raw = sample_action(weights, features, log_std, rng)
        total += log_prob_grad(weights, features, raw, log_std)
    assert np.abs(total / n).max() < 0.05


@settings(max_examples=100)
@given(
    weights=arrays(np.float64, POLICY_DIM,
                   elements=st.floats(-10, 10)),
    feats=arrays(np.float64, N_FEATURES, elements=st.floats(-5, 5)),
    raw=arrays(np.float64, ACTION_DIM, elements=st.floats(-5, 5)),
)
def test_log_prob_is_finite_and_grad_shaped(weights, feats, raw):
    log_std = np.zeros(ACTION_DIM)
    lp = log_prob(weights, feats, raw, log_std)
    assert math.isfinite(lp)
    grad = log_prob_grad(weights, feats, raw, log_std)
    assert grad.shape == (POLICY_DIM,)
    assert np.all(np.isfinite(grad))


def test_policy_params_validation():
    params = PolicyParams(weights=np.zeros(POLICY_DIM),
                          log_std=np.full(ACTION_DIM, -np.inf))
    assert not params.weights.flags.writeable
    # the container also serves synthetic low-dimensional problems
    small = PolicyParams(weights=np.zeros(1), log_std=np.zeros(ACTION_DIM))
    assert small.weights.shape == (1,)
    with pytest.raises(ValueError):
        PolicyParams(weights=np.array([0.0, np.nan]),
                     log_std=np.zeros(ACTION_DIM))
    with pytest.raises(ValueError):
        PolicyParams(weights=np.zeros(POLICY_DIM),
                     log_std=np.full(ACTION_DIM, np.inf))
    with pytest.raises(ValueError):
        PolicyParams(weights=np.zeros(POLICY_DIM),
                     log_std=np.array([0.0, 0.0, 0.0, np.nan]))
