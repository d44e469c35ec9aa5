import json
import math

import numpy as np
import pytest

from banditlab.analysis import (
    GaussianLinearFactory,
    appendixF_bounds,
    appendixF_coverage_test,
    constant_policy_class,
    dr_equivalence_check,
    enumerated_in_sample_regret,
    in_sample_value,
    pointwise_in_sample_regret,
    regret_decomposition,
    theorem1_check,
    theorem2_bound,
    theorem2_empirical_check,
    theorem3_experiment,
    theorem6_identity_check,
    true_value,
    voronoi_masses,
)
from banditlab.analysis.bounds import POLICY, VALUE
from banditlab.core import (
    ConstantPolicy,
    Dataset,
    DomainError,
    QModel,
    UniformPolicy,
    ZeroQ,
    one_hot,
    substream,
)
from banditlab.envs import (
    DiscreteSpec,
    GaussianLinearSpec,
    NnLowerBoundSpec,
    NoisyClassificationSpec,
    noisy_classification_construct,
    optimal_policy,
    random_discrete_env,
    sample_dataset,
)
from banditlab.learners import (
    MlpLearner,
    TabularPolicy,
    TabularQ,
    TrainConfig,
    full_feedback_learner,
    tabular_interpolator,
)
from banditlab.objectives import (
    IPS_POLICY,
    VALUE_SQUARED,
    ObjectiveSpec,
    dr_value,
    full_feedback_value,
    ips_value,
    plugin_value,
)
from banditlab.verify import mixed_stability_env


def case3_env():
    """Every reward draw has exactly one positive entry."""
    return DiscreteSpec(np.array([0.4, 0.6]), [np.array([0.5, 0.5]), np.array([1.0])],
                        [np.array([[1.0, -1.0], [2.0, -0.5]]), np.array([[-1.0, 3.0]])], np.full((2, 2), 0.5))


# values -----------------------------------------------------------------------------------------

def test_true_value_nn_lowerbound():
    env = NnLowerBoundSpec(1.0)
    rng = np.random.default_rng(0)
    v = true_value(ConstantPolicy([0.0, 1.0]), env, n_mc=1000, rng=rng)
    assert v.mean == 2.0 and v.std_err == 0.0
    assert true_value(UniformPolicy(2), env, n_mc=1000, rng=rng).mean == 1.5


def test_true_value_gaussian_optimal_closed_form():
    # max(a, b) = (a + b)/2 + |a - b|/2 and x ~ N(0, I): V* = ||theta_0 - theta_1|| / sqrt(2 pi)
    env = GaussianLinearSpec.random(2, 10, 0.1, np.random.default_rng(0))
    oracle = np.linalg.norm(env.theta[0] - env.theta[1]) / math.sqrt(2 * math.pi)
    est = true_value(optimal_policy(env), env, n_mc=200_000, rng=np.random.default_rng(1))
    assert abs(est.mean - oracle) < 4 * est.std_err


def test_true_value_discrete_is_exact():
    env = random_discrete_env(5, 3, np.random.default_rng(0))
    pi = ConstantPolicy([0.2, 0.3, 0.5])
    assert true_value(pi, env).mean == pytest.approx(float(env.context_probs @ env.q_table @ pi.probs), abs=1e-15)


def test_in_sample_value():
    env = GaussianLinearSpec.random(2, 3, 0.0, np.random.default_rng(0))
    S = sample_dataset(env, 20, np.random.default_rng(1))
    q = env.true_q(S.contexts)
    assert in_sample_value(optimal_policy(env), S, env) == pytest.approx(q.max(axis=1).mean(), abs=1e-15)
    assert in_sample_value(UniformPolicy(2), S, env) == pytest.approx(q.mean(axis=1).mean(), abs=1e-15)


def test_in_sample_value_hand_instance():
    env = DiscreteSpec(np.array([0.5, 0.5]), [np.array([1.0])] * 2,
                       [np.array([[1.0, 3.0]]), np.array([[2.0, -1.0]])], np.full((2, 2), 0.5))
    S = Dataset([[0.0], [1.0]], [[1.0, 3.0], [2.0, -1.0]], [0, 0], [0.5, 0.5], 0.5, -1.0, 3.0)
    pi = TabularPolicy(S.contexts, [[1.0, 0.0], [1.0, 0.0]])  # IPS interpolator: both coefficients positive
    assert in_sample_value(pi, S, env) == 1.5


# decomposition ------------------------------------------------------------------------------------

SMALL = TrainConfig(epochs=20)


def small_decomposition(learners, master_seed=0, j=3):
    full = full_feedback_learner(16, SMALL)
    return regret_decomposition(GaussianLinearFactory(2, 4, 0.1), learners, j, full, n_train=30, n_test=50,
                                master_seed=master_seed)


def test_full_feedback_against_itself_has_zero_bandit_error():
    full = full_feedback_learner(16, SMALL)
    rep = regret_decomposition(GaussianLinearFactory(2, 4, 0.1), {"full": full}, 3, full, 30, 50)
    assert (rep.bandit_errors("full") == 0).all()
    assert rep.summary()["full"]["bandit"] == 0.0


def test_decomposition_telescopes_and_serializes():
    rep = small_decomposition({"ips": MlpLearner(IPS_POLICY, 0.0, 16, SMALL),
                               "value": MlpLearner(VALUE_SQUARED, 0.0, 16, SMALL)})
    s = rep.summary()
    for name in ("ips", "value"):
        assert s[name]["approximation"] + s[name]["estimation"] + s[name]["bandit"] == pytest.approx(
            s[name]["total"], abs=1e-12)
        assert s[name]["bandit_ci95"][0] <= s[name]["bandit"] <= s[name]["bandit_ci95"][1]
    assert "max_train_mse" in s["value"] and "max_train_mse" not in s["ips"]
    doc = json.loads(rep.to_json())
    for key in ("per_seed", "mean", "std", "summary", "excluded"):
        assert key in doc
    assert doc["n_seeds"] == 3 and len(rep.per_seed_csv().splitlines()) == 4
    assert rep.bar_csv().splitlines()[0] == "algorithm,bandit_error,std"


def test_decomposition_is_deterministic():
    learners = {"ips": MlpLearner(IPS_POLICY, 0.0, 16, SMALL)}
    assert small_decomposition(learners).to_json() == small_decomposition(learners).to_json()
    assert small_decomposition(learners).to_json() != small_decomposition(learners, master_seed=1).to_json()


def test_decomposition_excludes_failed_seeds():
    calls = []

    def flaky(S, seed):
        calls.append(seed)
        if len(calls) == 2:
            raise RuntimeError("diverged")
        return UniformPolicy(S.k)

    rep = small_decomposition({"flaky": flaky}, j=4)
    assert len(rep.per_seed) == 3 and len(rep.excluded) == 1
    assert "diverged" in rep.excluded[0]["error"]
    with pytest.raises(DomainError):
        small_decomposition({"ips": flaky}, j=1)


# regret from squared error ------------------------------------------------------------------------------

def test_mse_regret_bound_perfect_model():
    env = random_discrete_env(20, 3, np.random.default_rng(0), tau=0.1)
    rep = theorem1_check(TabularQ(env.contexts, env.q_table), env)
    assert rep.bound == 0.0 and rep.empirical == 0.0 and rep.holds


def test_mse_regret_bound_random_models_exact():
    rng = np.random.default_rng(1)
    for _ in range(100):
        env = random_discrete_env(20, int(rng.integers(2, 5)), rng, tau=0.05)
        qhat = TabularQ(env.contexts, env.q_table + rng.normal(0, rng.uniform(0.01, 1), env.q_table.shape))
        rep = theorem1_check(qhat, env, rng=rng)
        assert rep.holds
        assert rep.details["mismatch"]["holds"] and rep.details["transfer"]["holds"]


def test_mse_regret_transfer_hand_case():
    # one context, beta = (0.2, 0.8), squared errors (1, 0): E_beta = 0.2, worst policy 1 = 0.2 / 0.2
    env = DiscreteSpec(np.array([1.0]), [np.array([1.0])], [np.array([[0.0, 0.0]])], np.array([[0.2, 0.8]]))
    rep = theorem1_check(TabularQ(env.contexts, [[1.0, 0.0]]), env)
    assert rep.details["mse_beta"] == pytest.approx(0.2)
    assert rep.details["transfer"]["max_policy_mse"] == pytest.approx(1.0)
    assert rep.details["transfer"]["bound"] == pytest.approx(1.0)


def test_mse_regret_bound_monte_carlo_route():
    env = GaussianLinearSpec.random(2, 3, 0.1, np.random.default_rng(0))
    perturbed = GaussianLinearSpec(env.theta + 0.3, 0.0)

    class Shifted(QModel):
        def q_values(self, contexts):
            return perturbed.true_q(contexts) + np.array([0.0, 0.4])

    rep = theorem1_check(Shifted(), env, n_mc=20_000, rng=np.random.default_rng(1))
    assert rep.holds and rep.bound > 0


# in-sample lower bound ----------------------------------------------------------------------------------

def test_unstable_lower_bound_values():
    assert theorem2_bound(NnLowerBoundSpec(1.0), rng=np.random.default_rng(0), n_mc=50).mean == 0.5
    assert theorem2_bound(NnLowerBoundSpec(0.4), rng=np.random.default_rng(0), n_mc=50).mean == pytest.approx(0.2)
    assert theorem2_bound(case3_env()).mean == 0.0
    env = random_discrete_env(6, 2, np.random.default_rng(0), reward_low=0.1, reward_high=1.0)
    gaps = np.abs(env.q_table[:, 0] - env.q_table[:, 1])
    assert theorem2_bound(env).mean == pytest.approx(0.5 * float(env.context_probs @ gaps), abs=1e-15)
    with pytest.raises(DomainError):
        theorem2_bound(random_discrete_env(3, 3, np.random.default_rng(0)))


def test_unstable_lower_bound_equality_on_all_unstable_instance():
    rep = theorem2_empirical_check(NnLowerBoundSpec(1.0), n_train=6, j_seeds=3, rng=np.random.default_rng(0))
    assert rep.empirical == pytest.approx(0.5, abs=1e-12)
    assert abs(rep.empirical - rep.bound) <= 1e-9 and rep.holds
    assert rep.details["max_route_gap"] <= 1e-12


def test_stable_instance_has_zero_in_sample_regret():
    rep = theorem2_empirical_check(case3_env())
    assert rep.empirical == 0.0 and rep.bound == 0.0 and rep.holds


def test_unstable_lower_bound_mixed_instance():
    rep = theorem2_empirical_check(mixed_stability_env())
    assert rep.holds and rep.bound == pytest.approx(0.25)
    assert rep.empirical >= 0.5 * rep.bound


def test_in_sample_regret_routes_agree():
    env2 = NnLowerBoundSpec(1.0)
    S2 = sample_dataset(env2, 5, np.random.default_rng(1))
    joint = enumerated_in_sample_regret(S2, env2, ObjectiveSpec(IPS_POLICY))
    pointwise = np.mean([pointwise_in_sample_regret(env2, ObjectiveSpec(IPS_POLICY), x) for x in S2.contexts])
    assert joint == pytest.approx(pointwise, abs=1e-12)


# one-nearest-neighbor construction ------------------------------------------------------------------------

def test_voronoi_masses():
    np.testing.assert_allclose(voronoi_masses([0.0]), [1.0])
    np.testing.assert_allclose(voronoi_masses([-0.5, 0.5]), [0.5, 0.5])
    np.testing.assert_allclose(voronoi_masses([0.5, -1.0, 0.0]), [0.375, 0.25, 0.375])
    np.testing.assert_allclose(voronoi_masses([0.2, 0.2]), [1.0, 0.0])


@pytest.mark.parametrize("delta_r", [1.0, 0.2])
def test_nn_bandit_error_is_half_the_gap(delta_r):
    table = theorem3_experiment(delta_r, [10, 100], 200, master_seed=3)
    for row in table:
        assert abs(row["bandit_error"] - delta_r / 2) < 4 * row["bandit_se"]
        assert abs(row["full_regret"]) <= 1e-12  # Voronoi masses sum to 1 up to rounding


def test_nn_bandit_error_independent_of_n():
    t = theorem3_experiment(1.0, [10, 100, 1000], 150, master_seed=5)
    for a in t:
        for b in t:
            assert abs(a["bandit_error"] - b["bandit_error"]) <= 2 * math.hypot(a["bandit_se"], b["bandit_se"]) + 0.02


# noisy classification identities -------------------------------------------------------------------------

def test_noisy_classification_identities():
    for eta in (0.1, 0.25, 0.4):
        rep = theorem6_identity_check(NoisyClassificationSpec(eta, 2.0), 200, 100, np.random.default_rng(0))
        assert rep.holds and rep.empirical < 1e-10


def test_noisy_classification_special_policies():
    spec = NoisyClassificationSpec(0.25, 2.0)
    S = noisy_classification_construct(spec, 300, np.random.default_rng(0))
    assert ips_value(UniformPolicy(2), S) == pytest.approx(1.0, abs=1e-12)
    assert full_feedback_value(optimal_policy(spec), S) == pytest.approx(2.0 * 0.75, abs=1e-12)


# finite classes ----------------------------------------------------------------------------------------------

def test_finite_class_policy_bounds_closed_form():
    approx, est, bandit = appendixF_bounds(POLICY, 1.0, 0.5, 8, 0.1, 200)
    assert approx == 0.0
    assert est == pytest.approx(2 * math.sqrt(math.log(160) / 400), abs=1e-12)
    assert bandit == pytest.approx(4 * math.sqrt(math.log(160) / 400), abs=1e-12)


def test_finite_class_value_bounds_closed_form():
    # hand-expanded: log(|Q|/delta) = log(40), tau = 0.25, N = 100, eps = 0.01, delta_r = 2
    approx, est, bandit = appendixF_bounds(VALUE, 2.0, 0.25, 4, 0.1, 100, eps_class=0.01)
    lg = math.log(40)
    assert approx == pytest.approx(2 * math.sqrt(0.04), abs=1e-12)
    assert est == pytest.approx(4 * math.sqrt(lg / 200), abs=1e-12)
    expected = 40 * math.sqrt(lg / 100) + 6 * math.sqrt(2) * (lg / 25 * 0.01) ** 0.25 + 0.4
    assert bandit == pytest.approx(expected, abs=1e-12)
    no_eps = appendixF_bounds(VALUE, 2.0, 0.25, 4, 0.1, 100)
    assert no_eps[0] == 0.0 and no_eps[2] == pytest.approx(40 * math.sqrt(lg / 100), abs=1e-12)


def test_finite_class_bounds_validation():
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(DomainError):
            appendixF_bounds(POLICY, 1.0, 0.5, 8, bad, 200)
    with pytest.raises(DomainError):
        appendixF_bounds("other", 1.0, 0.5, 8, 0.1, 200)
    with pytest.raises(DomainError):
        appendixF_coverage_test(GaussianLinearSpec.random(2, 2, 0.1, np.random.default_rng(0)),
                                constant_policy_class(2, 8), 0.1, 10, 5, np.random.default_rng(0))


def test_constant_policy_class():
    cls = constant_policy_class(2, 8)
    assert len(cls) == 8
    np.testing.assert_allclose(cls[0].probs, [1.0, 0.0])
    np.testing.assert_allclose(cls[-1].probs, [0.0, 1.0])


def test_coverage_holds():
    env = random_discrete_env(20, 2, substream(0, "cov"))
    rep = appendixF_coverage_test(env, constant_policy_class(2, 8), 0.1, 200, 100, substream(1, "cov"))
    assert rep.holds and rep.bound == pytest.approx(0.1 + 3 * math.sqrt(0.09 / 100))


def test_coverage_trivial_delta():
    env = random_discrete_env(20, 2, substream(0, "cov"))
    rep = appendixF_coverage_test(env, constant_policy_class(2, 8), 0.999, 200, 50, substream(2, "cov"))
    assert rep.empirical <= 0.02


def test_coverage_deviation_shrinks_with_n():
    env = random_discrete_env(20, 2, substream(0, "cov"))
    small = appendixF_coverage_test(env, constant_policy_class(2, 8), 0.1, 200, 100, substream(3, "cov"))
    large = appendixF_coverage_test(env, constant_policy_class(2, 8), 0.1, 5000, 100, substream(4, "cov"))
    for key in ("mean_sup_dev_full", "mean_sup_dev_ips"):
        ratio = small.details[key] / large.details[key]
        assert 5 / 3 <= ratio <= 15


# doubly robust equivalence -----------------------------------------------------------------------------------

def test_dr_equivalence_and_negative_control():
    rng = np.random.default_rng(0)
    S = sample_dataset(NnLowerBoundSpec(1.0), 50, rng)
    assert dr_equivalence_check(S, 100, rng).empirical < 1e-10
    assert dr_equivalence_check(S, 100, rng, q_hat=ZeroQ(2)).empirical > 1e-3


def test_dr_with_logged_action_policy_equals_mean_reward():
    S = sample_dataset(NnLowerBoundSpec(1.0), 30, np.random.default_rng(0))
    q = tabular_interpolator(S, ObjectiveSpec(VALUE_SQUARED))
    pi = TabularPolicy(S.contexts, one_hot(S.actions, 2))
    assert dr_value(pi, q, S) == pytest.approx(S.observed_rewards.mean(), abs=1e-12)
    assert plugin_value(pi, q, S) == pytest.approx(S.observed_rewards.mean(), abs=1e-12)
