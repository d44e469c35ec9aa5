import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from banditlab.core import DimensionError, DomainError, substream
from banditlab.envs import (
    FixedBehavior,
    GaussianLinearSpec,
    NnLowerBoundSpec,
    NoisyClassificationSpec,
    NoisyLabelBehavior,
    PeakedBehavior,
    PositivityError,
    classification_to_bandit,
    gaussian_linear_sample,
    nn_lowerbound_sample,
    noisy_classification_construct,
    optimal_policy,
    random_discrete_env,
    resample_actions,
    sample_dataset,
    true_q,
    uniform_behavior,
)


def binomial_interval_prob(n, p, lo, hi):
    return sum(math.comb(n, j) * p ** j * (1 - p) ** (n - j) for j in range(lo, hi + 1))


# Gaussian-linear -----------------------------------------------------------------

def test_noiseless_rewards_equal_theta_x():
    theta = np.array([[0.2, 0.5, 0.1], [0.9, 0.3, 0.4]])
    spec = GaussianLinearSpec(theta, eps=0.0)
    S = gaussian_linear_sample(spec, uniform_behavior(2), 40, np.random.default_rng(1))
    np.testing.assert_array_equal(S.rewards, S.contexts @ theta.T)


def test_fixed_seed_gives_identical_dataset():
    spec = GaussianLinearSpec.random(2, 10, 0.1, substream(5, "theta"))
    a = gaussian_linear_sample(spec, uniform_behavior(2), 100, substream(5, "data"))
    b = gaussian_linear_sample(spec, uniform_behavior(2), 100, substream(5, "data"))
    assert a == b


def test_reference_configuration_shapes():
    spec = GaussianLinearSpec.random(2, 10, 0.1, np.random.default_rng(0))
    assert spec.theta.shape == (2, 10)
    assert (spec.theta >= 0).all() and (spec.theta <= 1).all()
    S = gaussian_linear_sample(spec, uniform_behavior(2), 100, np.random.default_rng(0))
    assert (S.n, S.k, S.d) == (100, 2, 10)
    assert S.r_min == S.rewards.min() and S.r_max == S.rewards.max()


def test_noise_has_requested_std():
    spec = GaussianLinearSpec(np.zeros((2, 3)), eps=0.1)
    x = np.ones((20000, 3))
    r = spec.sample_rewards(x, np.random.default_rng(0))
    assert r.std() == pytest.approx(0.1, rel=0.03)


def test_n_must_be_positive():
    spec = GaussianLinearSpec.random(2, 3, 0.1, np.random.default_rng(0))
    with pytest.raises(DomainError):
        gaussian_linear_sample(spec, uniform_behavior(2), 0, np.random.default_rng(0))


def test_true_q_columns_and_dimension_check():
    theta = np.array([[1.0, 0.0, 0.3], [0.0, 1.0, 0.7]])
    spec = GaussianLinearSpec(theta, eps=0.1)
    np.testing.assert_array_equal(true_q(spec, [1.0, 0.0, 0.0]), theta[:, 0])
    with pytest.raises(DimensionError):
        true_q(spec, [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 1000))
def test_true_q_is_linear(alpha, seed):
    rng = np.random.default_rng(seed)
    spec = GaussianLinearSpec.random(3, 4, 0.1, rng)
    x = rng.normal(size=4)
    np.testing.assert_allclose(true_q(spec, alpha * x), alpha * true_q(spec, x), atol=1e-12)


# behaviors -------------------------------------------------------------------------

def test_uniform_behavior():
    b2, b10 = uniform_behavior(2), uniform_behavior(10)
    np.testing.assert_array_equal(b2.action_probs(np.zeros((3, 1))), np.full((3, 2), 0.5))
    np.testing.assert_allclose(b10.action_probs(np.zeros((2, 4))), 0.1)
    assert b2.tau == 0.5 and b10.tau == pytest.approx(0.1)
    with pytest.raises(DomainError):
        uniform_behavior(1)


def test_peaked_behavior():
    beh = PeakedBehavior(4, 0.05, lambda x: (x[:, 0] > 0).astype(int))
    p = beh.action_probs(np.array([[1.0], [-1.0]]))
    np.testing.assert_allclose(p[0], [0.05, 0.85, 0.05, 0.05])
    np.testing.assert_allclose(p[1], [0.85, 0.05, 0.05, 0.05])
    assert beh.tau == 0.05


def test_behavior_below_floor_rejected():
    beh = FixedBehavior([1.0, 0.0])
    assert beh.tau == 0.0
    lying = FixedBehavior([0.05, 0.95])
    lying.tau = 0.1  # declared floor above the actual smallest probability
    with pytest.raises(PositivityError):
        lying.action_probs(np.zeros((1, 1)))


# resample_actions -------------------------------------------------------------------

def _base(n=100, seed=0):
    spec = GaussianLinearSpec.random(2, 10, 0.1, np.random.default_rng(seed))
    return spec, gaussian_linear_sample(spec, uniform_behavior(2), n, np.random.default_rng(seed + 1))


def test_resample_degenerate_behavior():
    _, S = _base()
    R = resample_actions(S, FixedBehavior([1.0, 0.0]), np.random.default_rng(0))
    assert (R.actions == 0).all() and (R.propensities == 1.0).all()


def test_resample_same_seed_same_actions():
    _, S = _base()
    a = resample_actions(S, uniform_behavior(2), substream(0, "r", 3))
    b = resample_actions(S, uniform_behavior(2), substream(0, "r", 3))
    assert np.array_equal(a.actions, b.actions)


def test_resample_keeps_contexts_and_rewards_bytewise():
    _, S = _base()
    R = resample_actions(S, uniform_behavior(2), np.random.default_rng(9))
    assert R.contexts.tobytes() == S.contexts.tobytes()
    assert R.rewards.tobytes() == S.rewards.tobytes()
    np.testing.assert_array_equal(R.observed_rewards, R.rewards[np.arange(R.n), R.actions])


def test_resample_action_fraction_binomial():
    # oracle: Binomial(100, 1/2) lands in [35, 65] with probability > 0.99
    prob = binomial_interval_prob(100, 0.5, 35, 65)
    assert prob >= 0.99
    _, S = _base()
    inside = 0
    for i in range(200):
        frac = np.mean(resample_actions(S, uniform_behavior(2), substream(11, "frac", i)).actions == 0)
        inside += 0.35 <= frac <= 0.65
    # 200 draws at success prob >= 0.99: fewer than 196 would be a 1-in-10^3 event
    assert inside >= 196


def test_resample_rejects_mismatched_k():
    _, S = _base()
    with pytest.raises(DimensionError):
        resample_actions(S, uniform_behavior(3), np.random.default_rng(0))


# lower-bound instance ---------------------------------------------------------------------

def test_nn_lowerbound_sample():
    S = nn_lowerbound_sample(NnLowerBoundSpec(1.0), 50, np.random.default_rng(0))
    np.testing.assert_array_equal(S.rewards, np.tile([1.0, 2.0], (50, 1)))
    assert S.d == 1 and (np.abs(S.contexts) <= 1).all()
    assert (S.propensities == 0.5).all()


def test_nn_lowerbound_optimal_policy_and_q():
    spec = NnLowerBoundSpec(1.0)
    x = np.linspace(-1, 1, 9).reshape(-1, 1)
    np.testing.assert_array_equal(optimal_policy(spec).action_probs(x), np.tile([0.0, 1.0], (9, 1)))
    np.testing.assert_array_equal(true_q(spec, x), np.tile([1.0, 2.0], (9, 1)))
    with pytest.raises(DomainError):
        NnLowerBoundSpec(0.0)


# classification ------------------------------------------------------------------------------

def test_classification_to_bandit():
    rng = np.random.default_rng(0)
    ex = [(rng.normal(size=3), 3), (rng.normal(size=3), 0)]
    S = classification_to_bandit(ex, 10, uniform_behavior(10), rng)
    np.testing.assert_array_equal(S.rewards[0], np.eye(10)[3])
    np.testing.assert_allclose(S.propensities, 0.1)
    with pytest.raises(DomainError):
        classification_to_bandit([(np.zeros(3), 10)], 10, uniform_behavior(10), rng)


def test_expected_observed_reward_is_one_over_k():
    # exact oracle: sum_a beta(a) * 1[a == label] = 1/k; empirical mean within 4 standard errors
    k, n = 5, 20000
    rng = np.random.default_rng(2)
    ex = [(np.zeros(1), int(lab)) for lab in rng.integers(0, k, size=n)]
    S = classification_to_bandit(ex, k, uniform_behavior(k), rng)
    se = math.sqrt((1 / k) * (1 - 1 / k) / n)
    assert abs(S.observed_rewards.mean() - 1 / k) < 4 * se


# noisy classification construction ----------------------------------------------------------

def test_noisy_true_q():
    spec = NoisyClassificationSpec(0.25, 1.0)
    x = np.array([[1.0, 1.0], [-1.0, -1.0]])
    np.testing.assert_allclose(true_q(spec, x), [[0.75, 0.25], [0.25, 0.75]])


@pytest.mark.parametrize("eta,c", [(0.1, 1.0), (0.25, 2.0), (0.4, 0.5)])
def test_reward_over_behavior_is_constant(eta, c):
    spec = NoisyClassificationSpec(eta, c)
    S = noisy_classification_construct(spec, 300, np.random.default_rng(0))
    beh = NoisyLabelBehavior(spec).action_probs(S.contexts)
    np.testing.assert_allclose(S.rewards / beh, c, atol=1e-12)
    assert S.tau == pytest.approx(eta)


def test_noisy_construction_needs_positive_eta():
    with pytest.raises(DomainError):
        noisy_classification_construct(NoisyClassificationSpec(0.0), 10, np.random.default_rng(0))
    with pytest.raises(DomainError):
        NoisyClassificationSpec(0.5)


def test_noisy_disagreement_rate():
    spec = NoisyClassificationSpec(0.25)
    n = 4000
    S = noisy_classification_construct(spec, n, np.random.default_rng(4))
    label_action = (spec.labels(S.contexts) == -1).astype(int)
    rate = np.mean(S.actions != label_action)
    assert abs(rate - 0.25) < 4 * math.sqrt(0.25 * 0.75 / n)


def test_noisy_optimal_policy_matches_labeler():
    spec = NoisyClassificationSpec(0.3)
    x = spec.sample_contexts(200, np.random.default_rng(0))
    act = optimal_policy(spec).action_probs(x).argmax(axis=1)
    np.testing.assert_array_equal(act, (spec.labels(x) == -1).astype(int))


def test_optimal_policy_dominant_row():
    theta = np.array([[0.9, 0.9], [0.1, 0.1]])
    x = np.abs(np.random.default_rng(0).normal(size=(20, 2)))
    pi = optimal_policy(GaussianLinearSpec(theta, 0.1))
    assert (pi.action_probs(x)[:, 0] == 1).all()


# invariants --------------------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_generated_datasets_respect_floor(seed, k):
    rng = np.random.default_rng(seed)
    env = random_discrete_env(6, k, rng, tau=0.05)
    S = sample_dataset(env, 50, rng)
    assert S.propensities.min() >= S.tau - 1e-12
    assert S.tau >= 0.05 - 1e-12
