"""Action-stability of training objectives at single datapoints.

A datapoint ``z = (x, r, p)`` carries the whole reward vector and the behavior
distribution.  An objective is action-stable at ``z`` when one prediction is
optimal for the per-record loss no matter which action was logged.
"""
from __future__ import annotations

import itertools
from typing import Callable, NamedTuple

import numpy as np

from .core import (
    IDENTITY_TOL,
    METRIC_TOL,
    Dataset,
    DomainError,
    Estimate,
    PolicyModel,
    check_distribution,
    derive_seed,
    mean_estimate,
    parallel_map,
    substream,
)
from .envs import BehaviorPolicy, Environment, resample_actions
from .learners import UnsupportedError
from .objectives import DOUBLY_ROBUST, FULL_FEEDBACK, IPS_POLICY, VALUE_SQUARED, ObjectiveSpec

ALL_NEGATIVE = "all_negative"
MULTI_POSITIVE = "multi_positive"
ONE_POSITIVE = "one_positive"
WITH_ZEROS = "with_zeros"
VALUE_OBJECTIVE = "value_objective"
# full feedback and doubly robust do not fit the sign-pattern taxonomy
ACTION_INDEPENDENT = "action_independent"
COMMON_ARGMAX = "common_argmax"
DISJOINT_ARGMAX = "disjoint_argmax"


class AugmentedDatapoint(NamedTuple):
    context: np.ndarray
    reward: np.ndarray
    behavior_probs: np.ndarray

    @classmethod
    def make(cls, context, reward, behavior_probs, tau: float = 0.0) -> "AugmentedDatapoint":
        r = np.asarray(reward, dtype=np.float64).ravel()
        p = check_distribution(behavior_probs)
        if p.shape != r.shape:
            raise DomainError("reward and behavior_probs lengths differ")
        if p.min() <= 0 or p.min() < tau - IDENTITY_TOL:
            raise DomainError("behavior probabilities violate the positivity floor")
        return cls(np.atleast_1d(np.asarray(context, dtype=np.float64)), r, p)

    @property
    def k(self) -> int:
        return self.reward.shape[0]


class StabilityVerdict(NamedTuple):
    stable: bool
    witness: np.ndarray | None
    case_tag: str


def _scale_tol(*arrays) -> float:
    scale = max(1.0, *(float(np.max(np.abs(a))) for a in arrays))
    return METRIC_TOL * scale


def _q_at(z: AugmentedDatapoint, objective: ObjectiveSpec) -> np.ndarray:
    return np.asarray(objective.q_model.q_values(z.context.reshape(1, -1))[0], dtype=np.float64)


def ips_coefficients(z: AugmentedDatapoint, lam: float = 0.0) -> np.ndarray:
    """``f(z(a)) = (r(a) - lam) / p(a)`` for every action."""
    return (z.reward - lam) / z.behavior_probs


def dr_weights(z: AugmentedDatapoint, q: np.ndarray) -> np.ndarray:
    """Row ``a``: weight vector of the doubly robust loss when ``a`` is logged."""
    k = z.k
    w = np.tile(q, (k, 1))
    w[np.arange(k), np.arange(k)] += (z.reward - q) / z.behavior_probs
    return w


def _vertex(k: int, a: int) -> np.ndarray:
    v = np.zeros(k)
    v[a] = 1.0
    return v


def stability_classify(z: AugmentedDatapoint, objective: ObjectiveSpec) -> StabilityVerdict:
    """Analytic stability verdict with a witness prediction when stable.

    IPS: stable iff exactly one coefficient is positive, or none is positive
    and at least one is zero.  Full feedback: the loss does not depend on the
    logged action, so always stable.  Doubly robust: each logged action gives
    a linear objective in the policy; stable iff their argmax sets share an
    action.  Value objective: always stable with witness ``r``.
    """
    k = z.k
    if objective.kind == VALUE_SQUARED:
        return StabilityVerdict(True, np.array(z.reward), VALUE_OBJECTIVE)
    if objective.kind == FULL_FEEDBACK:
        return StabilityVerdict(True, _vertex(k, int(np.argmax(z.reward))), ACTION_INDEPENDENT)
    if objective.kind == DOUBLY_ROBUST:
        w = dr_weights(z, _q_at(z, objective))
        tol = _scale_tol(w)
        best = w >= w.max(axis=1, keepdims=True) - tol
        common = np.flatnonzero(best.all(axis=0))
        if common.size:
            return StabilityVerdict(True, _vertex(k, int(common[0])), COMMON_ARGMAX)
        return StabilityVerdict(False, None, DISJOINT_ARGMAX)

    f = ips_coefficients(z, objective.baseline_lambda)
    tol = _scale_tol(f)
    pos = np.flatnonzero(f > tol)
    zero = np.flatnonzero(np.abs(f) <= tol)
    if pos.size == 1:
        return StabilityVerdict(True, _vertex(k, int(pos[0])), ONE_POSITIVE)
    if pos.size > 1:
        return StabilityVerdict(False, None, MULTI_POSITIVE)
    if zero.size:
        return StabilityVerdict(True, _vertex(k, int(zero[0])), WITH_ZEROS)
    return StabilityVerdict(False, None, ALL_NEGATIVE)


def per_action_loss(z: AugmentedDatapoint, objective: ObjectiveSpec, a: int, y: np.ndarray) -> float:
    """Objective contribution of prediction ``y`` when action ``a`` was logged.

    Written from each objective's record-level definition; larger is better
    for policy objectives, smaller for the value objective.
    """
    if objective.kind == VALUE_SQUARED:
        return float((y[a] - z.reward[a]) ** 2)
    if objective.kind == FULL_FEEDBACK:
        return float(np.dot(z.reward, y))
    if objective.kind == IPS_POLICY:
        return float((z.reward[a] - objective.baseline_lambda) * y[a] / z.behavior_probs[a])
    q = _q_at(z, objective)
    return float(np.dot(y, q) + y[a] / z.behavior_probs[a] * (z.reward[a] - q[a]))


def simplex_grid(k: int, resolution: int) -> np.ndarray:
    """All points of the simplex with coordinates in ``{0, 1/res, ..., 1}``."""
    pts = [c for c in itertools.product(range(resolution + 1), repeat=k - 1) if sum(c) <= resolution]
    grid = np.array([list(c) + [resolution - sum(c)] for c in pts], dtype=np.float64)
    return grid / resolution


def stability_brute_force(
    z: AugmentedDatapoint, objective: ObjectiveSpec, grid_resolution: int = 4
) -> StabilityVerdict:
    """Search a simplex grid for a prediction optimal under every logged action.

    The grid contains every vertex.  The policy objectives are linear in the
    prediction, so their per-action optima are attained on vertices and the
    verdict does not depend on ``grid_resolution``.  The value objective is
    checked at ``y = r``, its unconstrained minimizer.
    """
    k = z.k
    if k > 5:
        raise UnsupportedError("brute-force stability supports K <= 5")
    if objective.kind == VALUE_SQUARED:
        ok = all(per_action_loss(z, objective, a, z.reward) <= METRIC_TOL for a in range(k))
        return StabilityVerdict(ok, np.array(z.reward) if ok else None, VALUE_OBJECTIVE)

    grid = simplex_grid(k, max(1, int(grid_resolution)))
    losses = np.array([[per_action_loss(z, objective, a, y) for a in range(k)] for y in grid])
    tol = _scale_tol(losses)
    optimal = losses >= losses.max(axis=0) - tol
    hits = np.flatnonzero(optimal.all(axis=1))
    if hits.size:
        return StabilityVerdict(True, grid[hits[0]], "grid_witness")
    return StabilityVerdict(False, None, "no_common_optimum")


def witness_is_optimal(
    z: AugmentedDatapoint, objective: ObjectiveSpec, witness: np.ndarray, others: np.ndarray
) -> bool:
    """Check ``witness`` is at least as good as every row of ``others`` for every action."""
    sign = -1.0 if objective.kind == VALUE_SQUARED else 1.0
    for a in range(z.k):
        w = sign * per_action_loss(z, objective, a, witness)
        for y in others:
            if sign * per_action_loss(z, objective, a, y) > w + METRIC_TOL * max(1.0, abs(w)):
                return False
    return True


# ---------------------------------------------------------------------------
# Probability of instability
# ---------------------------------------------------------------------------

def _unstable_at(context, reward, probs, objective) -> float:
    z = AugmentedDatapoint(np.atleast_1d(context), np.asarray(reward, dtype=np.float64), probs)
    return 0.0 if stability_classify(z, objective).stable else 1.0


def pu_at(
    env: Environment,
    objective: ObjectiveSpec,
    context: np.ndarray,
    rng: np.random.Generator | None = None,
    n_reward_draws: int = 100,
    behavior: BehaviorPolicy | None = None,
) -> float:
    """Instability probability over reward draws at one context.

    Exact when the environment exposes a finite reward distribution.
    """
    behavior = env.default_behavior() if behavior is None else behavior
    x = np.asarray(context, dtype=np.float64).reshape(1, -1)
    probs = behavior.action_probs(x)[0]
    outcomes = env.reward_outcomes(x[0])
    if outcomes is not None:
        return float(sum(w * _unstable_at(x[0], r, probs, objective) for w, r in outcomes))
    if rng is None:
        raise DomainError("continuous rewards need an rng")
    rewards = env.sample_rewards(np.repeat(x, n_reward_draws, axis=0), rng)
    return float(np.mean([_unstable_at(x[0], r, probs, objective) for r in rewards]))


def estimate_pu(
    env: Environment,
    objective: ObjectiveSpec,
    n_contexts: int = 2000,
    n_reward_draws: int = 100,
    rng: np.random.Generator | None = None,
    behavior: BehaviorPolicy | None = None,
) -> Estimate:
    """``E_x[p_u(x)]`` with a normal-approximation standard error.

    Finite context sets with known probabilities (``context_probs``) are
    summed exactly; otherwise contexts are sampled.
    """
    px = getattr(env, "context_probs", None)
    if px is not None and env.reward_outcomes(env.contexts[0]) is not None:
        vals = [pu_at(env, objective, x, behavior=behavior) for x in env.contexts]
        return Estimate(float(np.dot(px, vals)), 0.0)
    if rng is None:
        raise DomainError("sampling p_u needs an rng")
    xs = env.sample_contexts(n_contexts, rng)
    vals = [pu_at(env, objective, x, rng, n_reward_draws, behavior) for x in xs]
    return mean_estimate(vals)


# ---------------------------------------------------------------------------
# TV-resampling experiment
# ---------------------------------------------------------------------------

class ReplicateError(RuntimeError):
    """Training failed on one action-resampling replicate."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"replicate {index} failed: {cause!r}")
        self.index = index
        self.cause = cause


def _run_replicate(job):
    index, base, behavior, trainer, master_seed, shared_init = job
    rng = substream(master_seed, "tv-actions", index)
    S = resample_actions(base, behavior, rng)
    seed = derive_seed(master_seed, "tv-train") if shared_init else derive_seed(master_seed, "tv-train", index)
    try:
        return trainer(S, seed)
    except Exception as exc:  # re-raised with the replicate index attached
        raise ReplicateError(index, exc) from exc


def tv_resampling_experiment(
    base: Dataset,
    behavior: BehaviorPolicy,
    m_seeds: int,
    trainer: Callable[[Dataset, int], PolicyModel],
    test_contexts: np.ndarray,
    master_seed: int = 0,
    env: Environment | None = None,
    jobs: int = 1,
    reduce: str = "mean",
    shared_init: bool = True,
) -> np.ndarray:
    """Pairwise TV between policies trained on independent action resamples.

    ``trainer(S, seed)`` must return a :class:`PolicyModel`; value learners
    should return their greedy policy.  Contexts and reward vectors of ``base``
    are shared by every replicate.  With ``shared_init`` every replicate also
    gets the same trainer seed, so the logged actions are the only thing that
    varies; otherwise initialization noise is mixed into the distances.
    """
    if m_seeds < 2:
        raise DomainError("need at least two resamples")
    if reduce not in ("mean", "max"):
        raise DomainError(f"unknown reduction {reduce!r}")
    jobs_in = [(i, base, behavior, trainer, master_seed, shared_init) for i in range(m_seeds)]
    policies = parallel_map(_run_replicate, jobs_in, jobs)
    probs = [p.action_probs(test_contexts) for p in policies]
    out = np.zeros((m_seeds, m_seeds))
    for i in range(m_seeds):
        for j in range(i + 1, m_seeds):
            tv = 0.5 * np.abs(probs[i] - probs[j]).sum(axis=1)
            out[i, j] = out[j, i] = float(tv.max() if reduce == "max" else tv.mean())
    return out


def tv_summary(matrix: np.ndarray) -> dict:
    m = matrix.shape[0]
    off = matrix[~np.eye(m, dtype=bool)]
    return {"mean_offdiag": float(off.mean()), "max_offdiag": float(off.max())}


def tv_matrix_csv(matrix: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in matrix)
