"""Training objectives and value estimators.

Every policy objective here is linear in the policy at each record: the
per-record value is ``<pi(.|x_i), w_i>`` for a weight vector ``w_i`` that
depends only on the logged data (see :func:`policy_weights`).  That single fact
drives the value estimates, the logit gradients and the stability analysis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from .core import Dataset, DimensionError, DomainError, LoggedInteraction, PolicyModel, QModel

FULL_FEEDBACK = "full_feedback"
IPS_POLICY = "ips_policy"
VALUE_SQUARED = "value_squared"
DOUBLY_ROBUST = "doubly_robust"
KINDS = (FULL_FEEDBACK, IPS_POLICY, VALUE_SQUARED, DOUBLY_ROBUST)
POLICY_KINDS = (FULL_FEEDBACK, IPS_POLICY, DOUBLY_ROBUST)


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which objective to optimize.

    ``baseline_lambda`` is subtracted from the observed reward by the IPS
    objective (effective reward ``r - lambda``).  ``q_model`` is the fitted
    value model used by the doubly robust objective.
    """

    kind: str
    baseline_lambda: float = 0.0
    q_model: QModel | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown objective kind {self.kind!r}; expected one of {KINDS}")
        if not np.isfinite(self.baseline_lambda):
            raise DomainError("baseline_lambda must be finite")
        if self.kind == DOUBLY_ROBUST and self.q_model is None:
            raise DomainError("doubly_robust objective requires q_model")

    @property
    def is_policy(self) -> bool:
        return self.kind in POLICY_KINDS

    @property
    def maximize(self) -> bool:
        return self.is_policy


# ---------------------------------------------------------------------------
# Full-dataset scores
# ---------------------------------------------------------------------------

def full_feedback_value(pi: PolicyModel, S: Dataset) -> float:
    """Empirical value ``(1/N) sum_i <r_i, pi(.|x_i)>`` with full reward vectors."""
    probs = pi.action_probs(S.contexts)
    return float(np.mean(np.sum(S.rewards * probs, axis=1)))


def ips_value(pi: PolicyModel, S: Dataset, lam: float = 0.0) -> float:
    """Importance-weighted value ``(1/N) sum_i (r_i(a_i) - lam) pi(a_i|x_i) / p_i``."""
    if (S.propensities <= 0).any():
        raise DomainError("zero propensity")
    probs = pi.action_probs(S.contexts)
    taken = probs[np.arange(S.n), S.actions]
    return float(np.mean((S.observed_rewards - lam) * taken / S.propensities))


def value_squared_loss(q: QModel, S: Dataset) -> float:
    """Sum of squared errors at the logged actions."""
    pred = q.q_values(S.contexts)[np.arange(S.n), S.actions]
    return float(np.sum((pred - S.observed_rewards) ** 2))


def plugin_value(pi: PolicyModel, q: QModel, S: Dataset) -> float:
    """Direct-method value ``(1/N) sum_i sum_a pi(a|x_i) q(x_i, a)``."""
    return float(np.mean(np.sum(pi.action_probs(S.contexts) * q.q_values(S.contexts), axis=1)))


def dr_value(pi: PolicyModel, q: QModel, S: Dataset) -> float:
    """Doubly robust value, normalized by N.

    ``(1/N) sum_i [ sum_a pi(a|x_i) q(x_i,a) + pi(a_i|x_i)/p_i (r_i(a_i) - q(x_i,a_i)) ]``
    """
    probs = pi.action_probs(S.contexts)
    qv = q.q_values(S.contexts)
    rows = np.arange(S.n)
    correction = probs[rows, S.actions] / S.propensities * (S.observed_rewards - qv[rows, S.actions])
    return float(np.mean(np.sum(probs * qv, axis=1) + correction))


def pointwise_policy_coefficient(record: LoggedInteraction, lam: float = 0.0) -> float:
    """Coefficient ``(r(a) - lam) / p`` multiplying ``pi(a|x)`` in the IPS objective."""
    return (float(record.reward[record.action]) - lam) / float(record.propensity)


def score(spec: ObjectiveSpec, model, S: Dataset) -> float:
    """Dataset-level score of ``model`` under ``spec`` (value, or squared loss)."""
    if spec.kind == FULL_FEEDBACK:
        return full_feedback_value(model, S)
    if spec.kind == IPS_POLICY:
        return ips_value(model, S, spec.baseline_lambda)
    if spec.kind == DOUBLY_ROBUST:
        return dr_value(model, spec.q_model, S)
    return value_squared_loss(model, S)


# ---------------------------------------------------------------------------
# Per-record weights and gradients
# ---------------------------------------------------------------------------

class Targets(NamedTuple):
    """Per-record training targets, sliceable into minibatches.

    Policy objectives use ``weights`` ``(n, K)``; the value objective uses
    ``actions`` and ``observed``.
    """

    kind: str
    weights: np.ndarray | None
    actions: np.ndarray
    observed: np.ndarray

    def take(self, idx) -> "Targets":
        w = None if self.weights is None else self.weights[idx]
        return Targets(self.kind, w, self.actions[idx], self.observed[idx])

    @property
    def n(self) -> int:
        return self.actions.shape[0]


def policy_weights(spec: ObjectiveSpec, S: Dataset) -> np.ndarray:
    """``w_i`` with per-record policy value ``<pi(.|x_i), w_i>``."""
    rows = np.arange(S.n)
    if spec.kind == FULL_FEEDBACK:
        return np.array(S.rewards)
    if spec.kind == IPS_POLICY:
        w = np.zeros((S.n, S.k))
        w[rows, S.actions] = (S.observed_rewards - spec.baseline_lambda) / S.propensities
        return w
    if spec.kind == DOUBLY_ROBUST:
        qv = np.array(spec.q_model.q_values(S.contexts), dtype=np.float64)
        w = qv.copy()
        w[rows, S.actions] += (S.observed_rewards - qv[rows, S.actions]) / S.propensities
        return w
    raise DomainError("value_squared has no policy weights")


def prepare_targets(spec: ObjectiveSpec, S: Dataset) -> Targets:
    weights = policy_weights(spec, S) if spec.is_policy else None
    return Targets(spec.kind, weights, np.array(S.actions), np.array(S.observed_rewards))


def objective_gradient(
    spec: ObjectiveSpec, model_outputs: np.ndarray, batch: Union[Dataset, Targets]
) -> tuple[float, np.ndarray]:
    """Batch-mean objective and its gradient with respect to the model's raw outputs.

    Policy objectives take probabilities ``(n, K)`` (softmax outputs) and return
    the gradient of the mean value with respect to the pre-softmax logits.  The
    value objective takes predictions ``(n, K)`` and returns the gradient of the
    mean squared error at the logged actions.
    """
    t = prepare_targets(spec, batch) if isinstance(batch, Dataset) else batch
    return targets_gradient(model_outputs, t)


def targets_gradient(model_outputs: np.ndarray, t: Targets) -> tuple[float, np.ndarray]:
    """:func:`objective_gradient` on already-materialized targets."""
    out = np.asarray(model_outputs, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] != t.n:
        raise DimensionError(f"outputs shape {out.shape} does not match batch of {t.n}")
    n = t.n
    if t.kind == VALUE_SQUARED:
        rows = np.arange(n)
        resid = out[rows, t.actions] - t.observed
        grad = np.zeros_like(out)
        grad[rows, t.actions] = 2.0 * resid / n
        return float(np.mean(resid ** 2)), grad
    if out.shape[1] != t.weights.shape[1]:
        raise DimensionError("outputs and weights disagree on K")
    w = t.weights
    per_record = np.sum(out * w, axis=1)
    # d/dz <softmax(z), w> = p * (w - <p, w>)
    grad = out * (w - per_record[:, None]) / n
    return float(per_record.mean()), grad
