"""Calculators and empirical checks for the regret bounds.

Checks on finite environments use exact expectation sums, so their
inequalities carry no Monte Carlo error.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..core import (
    IDENTITY_TOL,
    ConstantPolicy,
    Dataset,
    DomainError,
    Estimate,
    PolicyModel,
    QModel,
    greedy_actions,
    mean_estimate,
    one_hot,
)
from ..envs import DiscreteSpec, Environment, optimal_policy, sample_dataset
from ..learners import finite_class_argmax, tabular_interpolator
from ..objectives import FULL_FEEDBACK, IPS_POLICY, ObjectiveSpec, full_feedback_value, ips_value
from ..stability import pu_at
from .values import in_sample_value, true_value

POLICY = "policy"
VALUE = "value"


@dataclass
class BoundReport:
    """``holds`` compares ``empirical`` to ``bound`` in the stated direction.

    ``slack`` is positive when the inequality holds: ``bound - empirical``
    for upper bounds and ``empirical - bound`` for lower bounds.
    """

    bound: float
    empirical: float
    holds: bool
    slack: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def upper_report(bound: float, empirical: float, tol: float = 0.0, **details) -> BoundReport:
    return BoundReport(float(bound), float(empirical), bool(empirical <= bound + tol),
                       float(bound - empirical), details)


def lower_report(bound: float, empirical: float, tol: float = 0.0, **details) -> BoundReport:
    return BoundReport(float(bound), float(empirical), bool(empirical >= bound - tol),
                       float(empirical - bound), details)


# ---------------------------------------------------------------------------
# Value-based learning: regret from squared error
# ---------------------------------------------------------------------------

def _random_policy_rows(m: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet rows, with some rows snapped to vertices to probe the corners."""
    rows = rng.dirichlet(np.full(k, 0.5), size=m)
    snap = rng.random(m) < 0.3
    rows[snap] = one_hot(rows[snap].argmax(axis=1), k)
    return rows


def theorem1_check(
    qhat: QModel,
    env: Environment,
    n_mc: int = 100_000,
    rng: np.random.Generator | None = None,
    n_policies: int = 20,
) -> BoundReport:
    """Regret of the greedy policy on ``qhat`` against ``(2/sqrt(tau)) * RMSE_beta``.

    Also checks the two steps separately: regret against twice the root of
    the worst-case policy-weighted squared error, and the transfer of squared
    error from the behavior distribution to arbitrary policies (random
    policies plus the worst-case one).  Exact on :class:`DiscreteSpec`.
    """
    if isinstance(env, DiscreteSpec):
        return _theorem1_exact(qhat, env, n_policies, rng or np.random.default_rng(0))
    if rng is None:
        raise DomainError("Monte Carlo check needs an rng")
    behavior = env.default_behavior()
    x = env.sample_contexts(n_mc, rng)
    q, qh = env.true_q(x), qhat.q_values(x)
    a, _ = behavior.sample(x, rng)
    rows = np.arange(x.shape[0])
    mse = mean_estimate((q[rows, a] - qh[rows, a]) ** 2)
    gaps = mean_estimate(q.max(axis=1) - q[rows, greedy_actions(qh)])
    tau = behavior.tau
    bound = 2.0 / math.sqrt(tau) * math.sqrt(max(mse.mean, 0.0))
    return upper_report(bound, gaps.mean, 2 * gaps.std_err, mse_beta=mse.mean, tau=tau)


def _theorem1_exact(qhat: QModel, env: DiscreteSpec, n_policies: int, rng) -> BoundReport:
    px, beta = env.context_probs, env.behavior
    q = env.q_table
    qh = np.asarray(qhat.q_values(env.contexts), dtype=np.float64)
    err2 = (q - qh) ** 2
    tau = float(beta.min())
    mse_beta = float(px @ np.sum(beta * err2, axis=1))
    pick = greedy_actions(qh)
    regret = float(px @ (q.max(axis=1) - q[np.arange(env.m), pick]))
    bound = 2.0 / math.sqrt(tau) * math.sqrt(mse_beta)

    sup_err = float(px @ err2.max(axis=1))
    mismatch_bound = 2.0 * math.sqrt(sup_err)
    policies = [_random_policy_rows(env.m, env.k, rng) for _ in range(n_policies)]
    policies.append(one_hot(err2.argmax(axis=1), env.k))
    transfer = [float(px @ np.sum(p * err2, axis=1)) for p in policies]
    transfer_bound = mse_beta / tau
    tol = IDENTITY_TOL * max(1.0, bound)
    mismatch_ok = regret <= mismatch_bound + tol
    transfer_ok = max(transfer) <= transfer_bound + IDENTITY_TOL * max(1.0, transfer_bound)
    rep = upper_report(bound, regret, tol, mse_beta=mse_beta, tau=tau)
    rep.details.update(
        mismatch={"bound": mismatch_bound, "regret": regret, "holds": bool(mismatch_ok)},
        transfer={"bound": transfer_bound, "max_policy_mse": max(transfer), "holds": bool(transfer_ok)},
    )
    rep.holds = bool(rep.holds and mismatch_ok and transfer_ok)
    return rep


# ---------------------------------------------------------------------------
# Policy-based learning: in-sample regret lower bound (K = 2)
# ---------------------------------------------------------------------------

def _require_k2(env: Environment) -> None:
    if env.k != 2:
        raise DomainError("the in-sample lower bound is stated for K = 2")


def _context_grid(env: Environment, n_mc: int, rng):
    """``(contexts, weights)``: exact for finite context sets, else sampled."""
    if isinstance(env, DiscreteSpec):
        return env.contexts, env.context_probs
    if rng is None:
        raise DomainError("continuous contexts need an rng")
    return env.sample_contexts(n_mc, rng), None


def theorem2_bound(
    env: Environment,
    objective: ObjectiveSpec | None = None,
    tau: float | None = None,
    n_mc: int = 2000,
    rng: np.random.Generator | None = None,
    n_reward_draws: int = 100,
) -> Estimate:
    """``tau * E_x[p_u(x) |Q(x,0) - Q(x,1)|]``."""
    _require_k2(env)
    objective = objective or ObjectiveSpec(IPS_POLICY)
    tau = env.default_behavior().tau if tau is None else tau
    xs, w = _context_grid(env, n_mc, rng)
    vals = []
    for x in xs:
        gap = abs(float(np.diff(env.true_q(x.reshape(1, -1))[0])[0]))
        vals.append(pu_at(env, objective, x, rng, n_reward_draws) * gap if gap > 0 else 0.0)
    vals = tau * np.asarray(vals)
    if w is not None:
        return Estimate(float(w @ vals), 0.0)
    return mean_estimate(vals)


def pointwise_in_sample_regret(env: Environment, objective: ObjectiveSpec, x: np.ndarray) -> float:
    """Expected regret at ``x`` of the tabular interpolator trained on one record there.

    The interpolator's decision at a training context depends only on that
    record, so the expected in-sample regret is the context average of this.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    q = env.true_q(x)[0]
    beta = env.default_behavior().action_probs(x)[0]
    outcomes = env.reward_outcomes(x[0])
    if outcomes is None:
        raise DomainError("exact in-sample regret needs finite reward outcomes")
    lo, hi = min(float(r.min()) for _, r in outcomes), max(float(r.max()) for _, r in outcomes)
    total = 0.0
    for w, r in outcomes:
        for a in range(env.k):
            S = Dataset(x, np.asarray(r).reshape(1, -1), [a], [beta[a]], 0.0, lo, hi)
            pi = tabular_interpolator(S, objective).action_probs(x)[0]
            total += w * beta[a] * (q.max() - float(pi @ q))
    return total


def enumerated_in_sample_regret(S: Dataset, env: Environment, objective: ObjectiveSpec) -> float:
    """``E_a[V(pi*; S) - V(pi_B; S)]`` by enumerating every logged-action pattern."""
    if S.k ** S.n > 5000:
        raise DomainError("too many action patterns to enumerate")
    beta = env.default_behavior().action_probs(S.contexts)
    v_star = in_sample_value(optimal_policy(env), S, env)
    rows = np.arange(S.n)
    total = 0.0
    for pattern in itertools.product(range(S.k), repeat=S.n):
        a = np.array(pattern)
        p = beta[rows, a]
        pi = tabular_interpolator(S.with_actions(a, p), objective)
        total += float(np.prod(p)) * (v_star - in_sample_value(pi, S, env))
    return total


def theorem2_empirical_check(
    env: Environment,
    objective: ObjectiveSpec | None = None,
    tau: float | None = None,
    n_train: int = 8,
    j_seeds: int = 20,
    rng: np.random.Generator | None = None,
) -> BoundReport:
    """Expected in-sample regret of the tabular interpolator against the lower bound.

    On finite environments both sides are exact sums.  Otherwise ``j_seeds``
    datasets of ``n_train`` contexts are drawn and, for each, all ``2^N``
    logged-action patterns are enumerated; the per-context formula is
    evaluated on the same contexts as a cross-check.
    """
    _require_k2(env)
    objective = objective or ObjectiveSpec(IPS_POLICY)
    tau = env.default_behavior().tau if tau is None else tau
    if isinstance(env, DiscreteSpec):
        regret = float(sum(w * pointwise_in_sample_regret(env, objective, x)
                           for w, x in zip(env.context_probs, env.contexts)))
        bound = theorem2_bound(env, objective, tau)
        return lower_report(bound.mean, regret, IDENTITY_TOL, tau=tau, method="exact")
    if rng is None:
        raise DomainError("continuous contexts need an rng")
    joint, pointwise = [], []
    for _ in range(j_seeds):
        S = sample_dataset(env, n_train, rng)
        joint.append(enumerated_in_sample_regret(S, env, objective))
        pointwise.append(np.mean([pointwise_in_sample_regret(env, objective, x) for x in S.contexts]))
    emp = mean_estimate(joint)
    bound = theorem2_bound(env, objective, tau, n_mc=j_seeds * n_train, rng=rng)
    tol = IDENTITY_TOL + 2 * math.hypot(emp.std_err, bound.std_err)
    return lower_report(bound.mean, emp.mean, tol, tau=tau, method="enumerated",
                      max_route_gap=float(np.max(np.abs(np.array(joint) - np.array(pointwise)))))


# ---------------------------------------------------------------------------
# Finite model classes
# ---------------------------------------------------------------------------

def appendixF_bounds(
    kind: str,
    delta_r: float,
    tau: float,
    class_size: int,
    delta: float,
    n: int,
    eps_class: float = 0.0,
) -> tuple[float, float, float]:
    """``(approximation, estimation, bandit)`` high-probability bounds.

    ``kind="policy"``: finite policy class, ``eps_class`` is the value gap of
    the best member.  ``kind="value"``: finite Q class, ``eps_class`` is the
    best member's behavior-weighted squared error.
    """
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    if delta_r <= 0 or tau <= 0 or class_size < 1 or n < 1 or eps_class < 0:
        raise DomainError("bound parameters must be positive")
    if kind == POLICY:
        root = math.sqrt(math.log(2 * class_size / delta) / (2 * n))
        return eps_class, 2 * delta_r * root, 2 * delta_r / tau * root
    if kind == VALUE:
        log_term = math.log(class_size / delta)
        approx = 2 * math.sqrt(eps_class / tau)
        est = 2 * delta_r * math.sqrt(log_term / (2 * n))
        bandit = (10 * delta_r / math.sqrt(tau) * math.sqrt(log_term / n)
                  + 6 * math.sqrt(delta_r) * (log_term / (tau * n) * eps_class) ** 0.25
                  + approx)
        return approx, est, bandit
    raise DomainError(f"unknown bound kind {kind!r}")


def constant_policy_class(k: int, size: int) -> list[PolicyModel]:
    """``size`` context-independent policies spread over the simplex edge 0-1."""
    if k < 2 or size < 1:
        raise DomainError("need k >= 2 and a non-empty class")
    out = []
    for t in np.linspace(0.0, 1.0, size):
        p = np.zeros(k)
        p[0], p[1] = 1 - t, t
        out.append(ConstantPolicy(p))
    return out


def _sup_deviations(policies, S: Dataset, values: np.ndarray):
    dev_f = max(abs(full_feedback_value(p, S) - v) for p, v in zip(policies, values))
    dev_b = max(abs(ips_value(p, S) - v) for p, v in zip(policies, values))
    return dev_f, dev_b


def appendixF_coverage_test(
    env: Environment,
    finite_class: Sequence[PolicyModel],
    delta: float,
    n: int,
    j_resamples: int,
    rng: np.random.Generator,
) -> BoundReport:
    """Fraction of resampled datasets violating the finite-class policy bounds.

    For each dataset the full-feedback and IPS maximizers over the class are
    found by exhaustive search and scored by their exact true value.  The
    report holds when the violation fraction is at most
    ``delta + 3 sqrt(delta (1 - delta) / J)``.
    """
    if env.reward_range is None:
        raise DomainError("coverage needs bounded rewards")
    if not 1 <= len(finite_class) <= 64:
        raise DomainError("finite class must have 1 to 64 members")
    r_min, r_max = env.reward_range
    delta_r = r_max - r_min
    tau = env.default_behavior().tau
    _, est_bound, bandit_bound = appendixF_bounds(POLICY, delta_r, tau, len(finite_class), delta, n)
    values = np.array([float(true_value(p, env, rng=rng)) for p in finite_class])
    v_sup = float(values.max())
    full_spec, ips_spec = ObjectiveSpec(FULL_FEEDBACK), ObjectiveSpec(IPS_POLICY)
    violations, est_errs, bandit_errs, dev_f, dev_b = 0, [], [], [], []
    for _ in range(j_resamples):
        S = sample_dataset(env, n, rng)
        i_f = finite_class_argmax(finite_class, full_spec, S)
        i_b = finite_class_argmax(finite_class, ips_spec, S)
        est, bandit = v_sup - values[i_f], values[i_f] - values[i_b]
        est_errs.append(est)
        bandit_errs.append(bandit)
        violations += int(est > est_bound or bandit > bandit_bound)
        f, b = _sup_deviations(finite_class, S, values)
        dev_f.append(f)
        dev_b.append(b)
    frac = violations / j_resamples
    allowed = delta + 3 * math.sqrt(delta * (1 - delta) / j_resamples)
    return upper_report(allowed, frac, 0.0,
                        estimation_bound=est_bound, bandit_bound=bandit_bound,
                        mean_estimation_error=float(np.mean(est_errs)),
                        mean_bandit_error=float(np.mean(bandit_errs)),
                        mean_sup_dev_full=float(np.mean(dev_f)),
                        mean_sup_dev_ips=float(np.mean(dev_b)),
                        delta_r=delta_r, tau=tau)
