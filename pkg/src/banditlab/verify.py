"""Scaled-down check suite run by ``banditlab verify-all``.

Each check returns a :class:`CheckResult`; sizes are parameters so the same
code can run at desk scale or at the full acceptance scale.
"""
from __future__ import annotations

import io
from typing import Callable, NamedTuple

import numpy as np

from .analysis import (
    appendixF_coverage_test,
    constant_policy_class,
    dr_equivalence_check,
    theorem1_check,
    theorem2_empirical_check,
    theorem3_experiment,
    theorem6_identity_check,
)
from .core import ZeroQ, dataset_read, dataset_write, substream
from .envs import (
    DiscreteSpec,
    GaussianLinearSpec,
    NnLowerBoundSpec,
    NoisyClassificationSpec,
    gaussian_linear_sample,
    nn_lowerbound_sample,
    random_discrete_env,
    uniform_behavior,
)
from .learners import LINEAR, SOFTMAX, MlpParams, MlpQ, TabularQ, grad_check
from .objectives import (
    DOUBLY_ROBUST,
    IPS_POLICY,
    KINDS,
    VALUE_SQUARED,
    ObjectiveSpec,
)
from .stability import AugmentedDatapoint, stability_brute_force, stability_classify


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def random_datapoint(k: int, rng: np.random.Generator) -> AugmentedDatapoint:
    """Random ``z`` mixing continuous rewards with small-integer ones (to hit zeros and ties)."""
    if rng.random() < 0.5:
        r = rng.normal(size=k)
    else:
        r = rng.integers(-1, 2, size=k).astype(np.float64)
    if rng.random() < 0.5:
        p = np.full(k, 1.0 / k)
    else:
        p = 0.05 + (1 - 0.05 * k) * rng.dirichlet(np.ones(k))
        p = p / p.sum()
    return AugmentedDatapoint(np.zeros(1), r, p)


def random_objective(kind: str, k: int, rng: np.random.Generator) -> ObjectiveSpec:
    if kind == IPS_POLICY:
        lam = float(rng.choice([0.0, 0.5, -0.1, rng.normal()]))
        return ObjectiveSpec(IPS_POLICY, lam)
    if kind == DOUBLY_ROBUST:
        q = rng.normal(size=k) if rng.random() < 0.5 else rng.integers(-1, 2, size=k).astype(np.float64)
        return ObjectiveSpec(DOUBLY_ROBUST, q_model=TabularQ(np.zeros((1, 1)), q.reshape(1, -1)))
    return ObjectiveSpec(kind)


def check_stability_agreement(n_per: int = 200, seed: int = 0) -> CheckResult:
    rng = substream(seed, "verify-stability")
    mismatches, total = 0, 0
    for k in (2, 3, 4, 5):
        for kind in KINDS:
            for _ in range(n_per):
                z = random_datapoint(k, rng)
                obj = random_objective(kind, k, rng)
                total += 1
                if stability_classify(z, obj).stable != stability_brute_force(z, obj).stable:
                    mismatches += 1
    return CheckResult("stability_agreement", mismatches == 0, f"{mismatches}/{total} mismatches")


def check_value_stable(n: int = 2000, seed: int = 0) -> CheckResult:
    rng = substream(seed, "verify-value-stable")
    spec = ObjectiveSpec(VALUE_SQUARED)
    bad = 0
    for _ in range(n):
        z = random_datapoint(int(rng.integers(2, 6)), rng)
        v = stability_classify(z, spec)
        if not (v.stable and np.array_equal(v.witness, z.reward)):
            bad += 1
    return CheckResult("value_objective_stable", bad == 0, f"{bad}/{n} failures")


def check_dr_equivalence(n_policies: int = 100, seed: int = 0) -> CheckResult:
    rng = substream(seed, "verify-dr")
    S = nn_lowerbound_sample(NnLowerBoundSpec(1.0), 50, rng)
    good = dr_equivalence_check(S, n_policies, rng)
    control = dr_equivalence_check(S, n_policies, rng, q_hat=ZeroQ(S.k))
    ok = good.holds and control.empirical > 1e-3
    return CheckResult("dr_equivalence", ok,
                       f"residual {good.empirical:.3g}; zeroed-Q control {control.empirical:.3g}")


def check_theorem6(n_policies: int = 100, seed: int = 0) -> CheckResult:
    worst = 0.0
    for eta in (0.1, 0.25, 0.4):
        for c in (1.0, 2.0):
            rng = substream(seed, f"verify-noisy-{eta}-{c}")
            rep = theorem6_identity_check(NoisyClassificationSpec(eta, c), 200, n_policies, rng)
            worst = max(worst, rep.empirical)
    return CheckResult("noisy_classification_identities", worst < 1e-10, f"max residual {worst:.3g}")


def check_theorem1(n_qhat: int = 200, seed: int = 0) -> CheckResult:
    rng = substream(seed, "verify-theorem1")
    fails = {"bound": 0, "mismatch": 0, "transfer": 0}
    for _ in range(n_qhat):
        env = random_discrete_env(20, int(rng.integers(2, 5)), rng, tau=None if rng.random() < 0.5 else 0.1)
        qhat = TabularQ(env.contexts, env.q_table + rng.normal(0, rng.uniform(0.01, 1.0), env.q_table.shape))
        rep = theorem1_check(qhat, env, rng=rng)
        fails["bound"] += rep.empirical > rep.bound + 1e-9 * max(1.0, rep.bound)
        fails["mismatch"] += not rep.details["mismatch"]["holds"]
        fails["transfer"] += not rep.details["transfer"]["holds"]
    return CheckResult("regret_from_mse", sum(fails.values()) == 0, f"violations {fails}")


def mixed_stability_env() -> DiscreteSpec:
    """Two equally likely contexts: both rewards positive at one, one negative at the other."""
    return DiscreteSpec(
        np.array([0.5, 0.5]),
        [np.array([1.0]), np.array([1.0])],
        [np.array([[1.0, 2.0]]), np.array([[1.0, -1.0]])],
        np.full((2, 2), 0.5),
    )


def check_theorem2(seed: int = 0) -> CheckResult:
    rng = substream(seed, "verify-theorem2")
    nn = theorem2_empirical_check(NnLowerBoundSpec(1.0), n_train=6, j_seeds=4, rng=rng)
    mixed = theorem2_empirical_check(mixed_stability_env())
    ok = nn.holds and abs(nn.empirical - nn.bound) <= 1e-9 and mixed.holds
    return CheckResult("in_sample_lower_bound", ok,
                       f"all-unstable regret {nn.empirical:.12g} vs bound {nn.bound:.12g}; "
                       f"mixed {mixed.empirical:.4g} >= {mixed.bound:.4g}")


def check_theorem3(j_seeds: int = 100, seed: int = 0) -> CheckResult:
    table = theorem3_experiment(1.0, [10, 100, 1000], j_seeds, seed)
    ok = all(abs(r["bandit_error"] - 0.5) <= 0.05 for r in table) and table[-1]["full_regret"] < 0.02
    detail = "; ".join(f"N={r['n']}: {r['bandit_error']:.4f}" for r in table)
    return CheckResult("one_nn_bandit_error", ok, detail)


def check_appendix_f(j: int = 200, seed: int = 0) -> CheckResult:
    rng = substream(seed, "verify-appendixF")
    env = random_discrete_env(20, 2, rng)
    rep = appendixF_coverage_test(env, constant_policy_class(2, 8), 0.1, 200, j, rng)
    return CheckResult("finite_class_coverage", rep.holds, f"violation fraction {rep.empirical:.4f} <= {rep.bound:.4f}")


def check_gradients(seed: int = 0) -> CheckResult:
    rng = substream(seed, "verify-grad")
    env = GaussianLinearSpec.random(2, 4, 0.1, rng)
    S = gaussian_linear_sample(env, uniform_behavior(2), 8, rng)
    q = MlpParams.init(4, 16, 2, LINEAR, rng)
    errs = {}
    for kind in (VALUE_SQUARED, IPS_POLICY, DOUBLY_ROBUST):
        head = LINEAR if kind == VALUE_SQUARED else SOFTMAX
        params = MlpParams.init(4, 16, 2, head, rng)
        spec = ObjectiveSpec(kind, 0.0, MlpQ(q) if kind == DOUBLY_ROBUST else None)
        errs[kind] = grad_check(params, spec, S, rng=rng)
    ok = max(errs.values()) < 1e-5
    return CheckResult("gradient_check", ok, ", ".join(f"{k} {v:.2e}" for k, v in errs.items()))


def check_roundtrip(seed: int = 0) -> CheckResult:
    rng = substream(seed, "verify-io")
    env = GaussianLinearSpec.random(3, 5, 0.1, rng)
    S = gaussian_linear_sample(env, uniform_behavior(3), 50, rng)
    buf = io.StringIO()
    dataset_write(S, buf)
    buf.seek(0)
    same = dataset_read(buf) == S
    return CheckResult("dataset_roundtrip", same, "bit-exact" if same else "mismatch")


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "stability_agreement": check_stability_agreement,
    "value_objective_stable": check_value_stable,
    "dr_equivalence": check_dr_equivalence,
    "noisy_classification_identities": check_theorem6,
    "regret_from_mse": check_theorem1,
    "in_sample_lower_bound": check_theorem2,
    "one_nn_bandit_error": check_theorem3,
    "finite_class_coverage": check_appendix_f,
    "gradient_check": check_gradients,
    "dataset_roundtrip": check_roundtrip,
}


def run_all(seed: int = 0) -> list[CheckResult]:
    return [fn(seed=seed) for fn in CHECKS.values()]
