"""Exact interpolators: nearest-neighbor rules, lookup tables and finite policy classes."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..core import (
    Dataset,
    DomainError,
    GreedyPolicy,
    PolicyModel,
    QModel,
    one_hot,
)
from ..objectives import (
    VALUE_SQUARED,
    ObjectiveSpec,
    policy_weights,
    score,
)


class UnsupportedError(DomainError):
    pass


def nearest_index(train: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Brute-force Euclidean nearest neighbor; distance ties go to the lowest index."""
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q.reshape(-1, 1)
    out = np.empty(q.shape[0], dtype=np.int64)
    # chunk the (queries x train) distance matrix to bound memory
    step = max(1, 2_000_000 // max(1, train.shape[0]))
    for s in range(0, q.shape[0], step):
        diff = q[s:s + step, None, :] - train[None, :, :]
        out[s:s + step] = np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
    return out


class NearestNeighborPolicy(PolicyModel):
    """Plays ``decisions[i(x)]`` where ``i(x)`` is the nearest training context."""

    def __init__(self, contexts: np.ndarray, decisions: np.ndarray, k: int):
        self.contexts = np.asarray(contexts, dtype=np.float64)
        self.decisions = np.asarray(decisions, dtype=np.int64)
        self.n_actions = k

    def action_probs(self, contexts):
        return one_hot(self.decisions[nearest_index(self.contexts, contexts)], self.n_actions)


def one_nn_bandit_policy(S: Dataset) -> NearestNeighborPolicy:
    """Copy the neighbor's logged action if its reward was positive, else play the other one."""
    if S.k != 2:
        raise UnsupportedError("the bandit 1-NN rule is defined for K = 2")
    decisions = np.where(S.observed_rewards > 0, S.actions, 1 - S.actions)
    return NearestNeighborPolicy(S.contexts, decisions, 2)


def one_nn_full_policy(S: Dataset) -> NearestNeighborPolicy:
    """Play the best action of the nearest neighbor's full reward vector."""
    return NearestNeighborPolicy(S.contexts, np.argmax(S.rewards, axis=1), S.k)


class _Table:
    def __init__(self, contexts: np.ndarray):
        self.keys = {}
        for i, row in enumerate(np.asarray(contexts, dtype=np.float64)):
            key = row.tobytes()
            if key in self.keys:
                raise DomainError(f"duplicate context at record {i}")
            self.keys[key] = i

    def rows(self, contexts) -> np.ndarray:
        x = np.asarray(contexts, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        try:
            return np.array([self.keys[r.tobytes()] for r in x], dtype=np.int64)
        except KeyError:
            raise KeyError("context not in table") from None


class TabularPolicy(PolicyModel):
    """Arbitrary distributions at a finite set of distinct contexts."""

    def __init__(self, contexts, probs):
        self.table = _Table(contexts)
        self.probs = np.asarray(probs, dtype=np.float64)
        self.n_actions = self.probs.shape[1]

    def action_probs(self, contexts):
        return self.probs[self.table.rows(contexts)]


class TabularQ(QModel):
    def __init__(self, contexts, values):
        self.table = _Table(contexts)
        self.values = np.asarray(values, dtype=np.float64)
        self.n_actions = self.values.shape[1]

    def q_values(self, contexts):
        return self.values[self.table.rows(contexts)]


def tabular_interpolator(S: Dataset, objective: ObjectiveSpec):
    """Per-context optimum of the training objective at every logged context.

    Policy objectives get a vertex of the simplex maximizing ``<pi, w_i>``; when
    the logged action is among the maximizers it is kept (this covers the
    zero-coefficient case), otherwise the lowest maximizing index is used.  For
    IPS with K = 2 this is the observed action when ``(r - lambda)/p > 0`` and
    the opposite one when it is negative.  The value objective gets ``r_i(a_i)``
    at ``(x_i, a_i)`` and 0 elsewhere.
    """
    if objective.kind == VALUE_SQUARED:
        values = np.zeros((S.n, S.k))
        values[np.arange(S.n), S.actions] = S.observed_rewards
        return TabularQ(S.contexts, values)
    w = policy_weights(objective, S)
    best = w.max(axis=1, keepdims=True)
    is_max = w == best
    keep = is_max[np.arange(S.n), S.actions]
    choice = np.where(keep, S.actions, np.argmax(is_max, axis=1))
    return TabularPolicy(S.contexts, one_hot(choice, S.k))


class TabularLearner:
    """Trainer wrapper: ``learner(S, seed)`` returns the tabular interpolator's policy."""

    def __init__(self, objective: ObjectiveSpec):
        self.objective = objective

    def __call__(self, S: Dataset, seed: int = 0) -> PolicyModel:
        model = tabular_interpolator(S, self.objective)
        return GreedyPolicy(model) if isinstance(model, QModel) else model


def finite_class_argmax(policies: Sequence, objective: ObjectiveSpec, S: Dataset) -> int:
    """Exhaustive search over a finite class; ties go to the lowest index.

    Policy objectives are maximized; for the value objective the members are Q
    models and the squared loss is minimized.
    """
    if not policies:
        raise DomainError("empty policy class")
    scores = np.array([score(objective, p, S) for p in policies])
    if objective.kind == VALUE_SQUARED:
        return int(np.argmin(scores))
    return int(np.argmax(scores))
