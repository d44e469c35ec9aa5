"""Adversarial and identity constructions, evaluated in closed form."""
from __future__ import annotations

import numpy as np

from ..core import Dataset, PolicyModel, QModel, mean_estimate, substream
from ..envs import (
    NnLowerBoundSpec,
    NoisyClassificationSpec,
    nn_lowerbound_sample,
    noisy_classification_construct,
    optimal_policy,
)
from ..learners import TabularPolicy, one_nn_bandit_policy, one_nn_full_policy, tabular_interpolator
from ..objectives import VALUE_SQUARED, ObjectiveSpec, dr_value, full_feedback_value, ips_value, plugin_value
from .bounds import BoundReport, upper_report


def voronoi_masses(points: np.ndarray, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Probability of each point's nearest-neighbor cell under ``U[low, high]``.

    Among exactly equal points the lowest index owns the cell, matching the
    nearest-neighbor tie rule.
    """
    x = np.asarray(points, dtype=np.float64).ravel()
    order = np.argsort(x, kind="stable")
    xs = x[order]
    edges = np.concatenate([[low], (xs[:-1] + xs[1:]) / 2, [high]])
    masses_sorted = np.diff(edges) / (high - low)
    out = np.zeros_like(x)
    # duplicates: collapse onto the first (lowest original index) copy
    first = {}
    for pos, i in enumerate(order):
        key = xs[pos]
        owner = first.setdefault(key, i)
        out[owner] += masses_sorted[pos]
    return out


def nn_policy_value_1d(pi: PolicyModel, S: Dataset, q: np.ndarray) -> float:
    """Exact value of a 1-NN policy on ``U[-1, 1]`` contexts with constant ``Q = q``."""
    masses = voronoi_masses(S.contexts[:, 0])
    probs = pi.action_probs(S.contexts)
    return float(masses @ (probs @ q))


def theorem3_experiment(
    delta_r: float,
    n_values,
    j_seeds: int,
    master_seed: int = 0,
) -> list[dict]:
    """Mean bandit error and full-feedback regret of 1-NN policies per dataset size."""
    spec = NnLowerBoundSpec(delta_r)
    q = np.array([1.0, 1.0 + delta_r])
    v_star = float(q.max())
    table = []
    for n in n_values:
        bandit, regret = [], []
        for j in range(j_seeds):
            S = nn_lowerbound_sample(spec, int(n), substream(master_seed, f"theorem3-n{int(n)}", j))
            v_f = nn_policy_value_1d(one_nn_full_policy(S), S, q)
            v_b = nn_policy_value_1d(one_nn_bandit_policy(S), S, q)
            bandit.append(v_f - v_b)
            regret.append(v_star - v_f)
        b, r = mean_estimate(bandit), mean_estimate(regret)
        table.append({
            "n": int(n),
            "bandit_error": b.mean,
            "bandit_se": b.std_err,
            "bandit_ci95": list(b.ci95),
            "full_regret": r.mean,
            "full_regret_se": r.std_err,
        })
    return table


def _random_tabular(S: Dataset, rng: np.random.Generator) -> TabularPolicy:
    rows = rng.dirichlet(np.ones(S.k), size=S.n)
    return TabularPolicy(S.contexts, rows)


def theorem6_identity_check(
    spec: NoisyClassificationSpec,
    n: int,
    n_policies: int,
    rng: np.random.Generator,
    tol: float = 1e-10,
) -> BoundReport:
    """Both empirical-value identities of the noisy-classification construction.

    ``V_B(pi) = c_r/N sum_i pi(a_i|x_i)`` and
    ``V_F(pi) = c_r eta + c_r (1 - 2 eta)/N sum_i <pi*(.|x_i), pi(.|x_i)>``.
    """
    S = noisy_classification_construct(spec, n, rng)
    star = optimal_policy(spec).action_probs(S.contexts)
    rows = np.arange(S.n)
    c, eta = spec.c_r, spec.eta
    res_b, res_f = [], []
    for _ in range(n_policies):
        pi = _random_tabular(S, rng)
        probs = pi.action_probs(S.contexts)
        res_b.append(abs(ips_value(pi, S) - c * probs[rows, S.actions].mean()))
        rhs_f = c * eta + c * (1 - 2 * eta) * np.sum(star * probs, axis=1).mean()
        res_f.append(abs(full_feedback_value(pi, S) - rhs_f))
    worst = max(max(res_b), max(res_f))
    return upper_report(tol, worst, 0.0, max_bandit_residual=max(res_b), max_full_residual=max(res_f))


def dr_equivalence_check(
    S: Dataset,
    n_policies: int,
    rng: np.random.Generator,
    q_hat: QModel | None = None,
    tol: float = 1e-10,
) -> BoundReport:
    """Largest gap between the doubly robust and plug-in values over random policies.

    With the default interpolating ``q_hat`` (fitted on ``S``) the two agree;
    passing a non-interpolating model serves as a negative control.
    """
    if q_hat is None:
        q_hat = tabular_interpolator(S, ObjectiveSpec(VALUE_SQUARED))
    gaps = []
    for _ in range(n_policies):
        pi = _random_tabular(S, rng)
        gaps.append(abs(dr_value(pi, q_hat, S) - plugin_value(pi, q_hat, S)))
    return upper_report(tol, max(gaps), 0.0, n_policies=n_policies)
