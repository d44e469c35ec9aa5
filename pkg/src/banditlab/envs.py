"""Synthetic environments, behavior policies and the adversarial constructions.

Every environment exposes context sampling, reward sampling and the true mean
reward ``Q(x, .)``.  Environments with finitely many reward outcomes per context
also expose them through :meth:`Environment.reward_outcomes`, which lets the
analysis code replace Monte Carlo with exact sums.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    Dataset,
    DimensionError,
    DomainError,
    GreedyPolicy,
    PolicyModel,
    QModel,
)


class PositivityError(DomainError):
    """Behavior probabilities fall below the declared floor tau."""


# ---------------------------------------------------------------------------
# Behavior policies
# ---------------------------------------------------------------------------

class BehaviorPolicy(PolicyModel):
    """A logging policy with exact propensities and a declared floor ``tau``."""

    tau: float

    def _probs(self, contexts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def action_probs(self, contexts):
        x = _as_contexts(contexts)
        p = self._probs(x)
        if (p < self.tau - 1e-15).any():
            raise PositivityError(f"behavior probability below declared tau={self.tau}")
        return p

    def sample(self, contexts, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw one action per context; returns ``(actions, propensities)``."""
        p = self.action_probs(contexts)
        return sample_from_rows(p, rng)


def sample_from_rows(probs: np.ndarray, rng: np.random.Generator):
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    actions = np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)
    # never return an action with zero probability because of rounding in the cdf
    for i in np.flatnonzero(probs[np.arange(len(actions)), actions] <= 0):
        actions[i] = int(np.flatnonzero(probs[i] > 0)[-1])
    return actions, probs[np.arange(len(actions)), actions]


class UniformBehavior(BehaviorPolicy):
    def __init__(self, k: int):
        if k < 2:
            raise DomainError("uniform behavior needs k >= 2")
        self.n_actions = k
        self.tau = 1.0 / k

    def _probs(self, contexts):
        return np.full((contexts.shape[0], self.n_actions), 1.0 / self.n_actions)


def uniform_behavior(k: int) -> UniformBehavior:
    """``beta(a|x) = 1/k`` everywhere, with ``tau = 1/k``."""
    return UniformBehavior(k)


class FixedBehavior(BehaviorPolicy):
    """Context-independent behavior; ``tau`` is its smallest probability."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.n_actions = self.probs.shape[0]
        self.tau = float(self.probs.min())

    def _probs(self, contexts):
        return np.tile(self.probs, (contexts.shape[0], 1))


class PeakedBehavior(BehaviorPolicy):
    """``1 - (k-1) gamma`` on a fixed classifier's prediction, ``gamma`` elsewhere.

    Stands in for hand-crafted logging policies whose exact definition is not
    available.  ``classifier`` maps ``(n, d)`` contexts to integer labels.
    """

    def __init__(self, k: int, gamma: float, classifier: Callable[[np.ndarray], np.ndarray]):
        if not 0 < gamma <= 1.0 / k:
            raise DomainError("gamma must lie in (0, 1/k]")
        self.n_actions = k
        self.gamma = gamma
        self.tau = gamma
        self.classifier = classifier

    def _probs(self, contexts):
        pred = np.asarray(self.classifier(contexts), dtype=np.int64)
        p = np.full((contexts.shape[0], self.n_actions), self.gamma)
        p[np.arange(len(pred)), pred] = 1.0 - (self.n_actions - 1) * self.gamma
        return p


class TableBehavior(BehaviorPolicy):
    """Behavior of a :class:`DiscreteSpec`, looked up by context index."""

    def __init__(self, table: np.ndarray):
        self.table = np.asarray(table, dtype=np.float64)
        self.n_actions = self.table.shape[1]
        self.tau = float(self.table.min())

    def _probs(self, contexts):
        return self.table[_context_index(contexts, self.table.shape[0])]


def _as_contexts(contexts) -> np.ndarray:
    x = np.asarray(contexts, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    return x


def _context_index(contexts, m: int) -> np.ndarray:
    x = _as_contexts(contexts)
    idx = x[:, 0].astype(np.int64)
    if x.shape[1] != 1 or (idx != x[:, 0]).any() or (idx < 0).any() or (idx >= m).any():
        raise DimensionError("discrete contexts are single integer indices")
    return idx


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------

class Environment:
    """Generative model of ``(x, r)`` with a known mean reward function."""

    k: int
    d: int

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sample_rewards(self, contexts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def true_q(self, contexts) -> np.ndarray:
        raise NotImplementedError

    def reward_outcomes(self, context) -> list[tuple[float, np.ndarray]] | None:
        """Finite reward distribution at one context, or ``None`` if continuous."""
        return None

    def default_behavior(self) -> BehaviorPolicy:
        return uniform_behavior(self.k)

    @property
    def reward_range(self) -> tuple[float, float] | None:
        """Declared ``(r_min, r_max)``, or ``None`` when rewards are unbounded."""
        return None

    def _check(self, contexts) -> np.ndarray:
        x = _as_contexts(contexts)
        if x.shape[1] != self.d:
            raise DimensionError(f"context dimension {x.shape[1]} != {self.d}")
        return x


class TrueQ(QModel):
    """An environment's mean reward function as a :class:`QModel`."""

    def __init__(self, env: Environment):
        self.env = env
        self.n_actions = env.k

    def q_values(self, contexts):
        return self.env.true_q(contexts)


@dataclass(frozen=True, eq=False)
class GaussianLinearSpec(Environment):
    """``x ~ N(0, I_d)``, ``r ~ N(theta x, eps^2 I)``.

    ``eps`` is the per-action reward noise standard deviation.  With ``clip`` set
    to ``(r_min, r_max)`` rewards are clipped and that range is declared;
    otherwise datasets record the observed range.
    """

    theta: np.ndarray
    eps: float = 0.1
    clip: tuple[float, float] | None = None

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim != 2:
            raise DimensionError("theta must be a K x d matrix")
        if self.eps < 0:
            raise DomainError("eps must be non-negative")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def random(cls, k: int, d: int, eps: float, rng: np.random.Generator, clip=None):
        """Draw ``theta ~ U([0, 1]^{K x d})``."""
        return cls(rng.uniform(0.0, 1.0, size=(k, d)), eps, clip)

    @property
    def k(self):
        return self.theta.shape[0]

    @property
    def d(self):
        return self.theta.shape[1]

    def sample_contexts(self, n, rng):
        return rng.standard_normal((n, self.d))

    def sample_rewards(self, contexts, rng):
        x = self._check(contexts)
        r = x @ self.theta.T + self.eps * rng.standard_normal((x.shape[0], self.k))
        if self.clip is not None:
            r = np.clip(r, *self.clip)
        return r

    def true_q(self, contexts):
        return self._check(contexts) @ self.theta.T

    def reward_outcomes(self, context):
        if self.eps == 0 and self.clip is None:
            return [(1.0, self.true_q(context)[0])]
        return None

    @property
    def reward_range(self):
        return self.clip


@dataclass(frozen=True)
class NnLowerBoundSpec(Environment):
    """``x ~ U([-1, 1])``, constant rewards ``(1, 1 + delta_r)``, uniform behavior."""

    delta_r: float = 1.0
    k: int = field(default=2, init=False)
    d: int = field(default=1, init=False)

    def __post_init__(self):
        if not self.delta_r > 0:
            raise DomainError("delta_r must be positive")

    def sample_contexts(self, n, rng):
        return rng.uniform(-1.0, 1.0, size=(n, 1))

    def sample_rewards(self, contexts, rng):
        return self.true_q(contexts)

    def true_q(self, contexts):
        x = self._check(contexts)
        return np.tile([1.0, 1.0 + self.delta_r], (x.shape[0], 1))

    def reward_outcomes(self, context):
        return [(1.0, np.array([1.0, 1.0 + self.delta_r]))]

    @property
    def reward_range(self):
        return (1.0, 1.0 + self.delta_r)


class GaussianContexts:
    def __init__(self, d: int):
        self.d = d

    def __call__(self, n, rng):
        return rng.standard_normal((n, self.d))


class LinearLabeler:
    """``sign(w . x)`` with ties mapped to +1."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def __call__(self, contexts):
        return np.where(_as_contexts(contexts) @ self.w >= 0, 1, -1)


@dataclass(frozen=True, eq=False)
class NoisyClassificationSpec(Environment):
    """Bandit problem built from a binary classification problem.

    With label ``y = 1`` the rewards are ``c_r (1 - eta, eta)`` and
    ``beta(0|x) = 1 - eta``; with ``y = -1`` both are mirrored.  Hence
    ``r(a) / beta(a|x) = c_r`` for both actions.
    """

    eta: float
    c_r: float = 1.0
    labeler: Callable[[np.ndarray], np.ndarray] = None
    context_sampler: Callable[[int, np.random.Generator], np.ndarray] = None
    d: int = 2
    k: int = field(default=2, init=False)

    def __post_init__(self):
        if not 0 <= self.eta < 0.5:
            raise DomainError("eta must lie in [0, 1/2)")
        if not self.c_r > 0:
            raise DomainError("c_r must be positive")
        if self.labeler is None:
            object.__setattr__(self, "labeler", LinearLabeler(np.ones(self.d)))
        if self.context_sampler is None:
            object.__setattr__(self, "context_sampler", GaussianContexts(self.d))

    def labels(self, contexts) -> np.ndarray:
        return np.asarray(self.labeler(self._check(contexts)))

    def sample_contexts(self, n, rng):
        return _as_contexts(self.context_sampler(n, rng))

    def sample_rewards(self, contexts, rng):
        return self.true_q(contexts)

    def true_q(self, contexts):
        y = self.labels(contexts)
        hi, lo = self.c_r * (1 - self.eta), self.c_r * self.eta
        return np.where((y == 1)[:, None], [hi, lo], [lo, hi])

    def reward_outcomes(self, context):
        return [(1.0, self.true_q(context)[0])]

    def default_behavior(self):
        return NoisyLabelBehavior(self)

    @property
    def reward_range(self):
        return (self.c_r * self.eta, self.c_r * (1 - self.eta))


class NoisyLabelBehavior(BehaviorPolicy):
    """Logs the true label's action with probability ``1 - eta``."""

    def __init__(self, spec: NoisyClassificationSpec):
        self.spec = spec
        self.n_actions = 2
        self.tau = spec.eta

    def _probs(self, contexts):
        y = self.spec.labels(contexts)
        e = self.spec.eta
        return np.where((y == 1)[:, None], [1 - e, e], [e, 1 - e])


@dataclass(frozen=True, eq=False)
class DiscreteSpec(Environment):
    """Finite context set with finite reward distributions, for exact expectations.

    Context ``j`` is encoded as the 1-vector ``[j]``.

    Parameters
    ----------
    context_probs : array (m,)
    outcome_probs : list of m arrays (o_j,)
    outcome_rewards : list of m arrays (o_j, K)
    behavior : array (m, K)
    r_bounds : optional declared reward range; defaults to the outcome range.
    """

    context_probs: np.ndarray
    outcome_probs: Sequence[np.ndarray]
    outcome_rewards: Sequence[np.ndarray]
    behavior: np.ndarray
    r_bounds: tuple[float, float] | None = None
    d: int = field(default=1, init=False)

    def __post_init__(self):
        px = np.asarray(self.context_probs, dtype=np.float64)
        beh = np.asarray(self.behavior, dtype=np.float64)
        probs = [np.asarray(p, dtype=np.float64) for p in self.outcome_probs]
        rews = [np.asarray(r, dtype=np.float64).reshape(len(p), -1) for p, r in zip(probs, self.outcome_rewards)]
        if abs(px.sum() - 1) > 1e-12 or any(abs(p.sum() - 1) > 1e-12 for p in probs):
            raise DomainError("probabilities must sum to 1")
        if len(probs) != px.shape[0] or beh.shape[0] != px.shape[0]:
            raise DimensionError("per-context tables disagree on the number of contexts")
        if np.any(np.abs(beh.sum(axis=1) - 1) > 1e-12) or (beh <= 0).any():
            raise DomainError("behavior rows must be strictly positive distributions")
        object.__setattr__(self, "context_probs", px)
        object.__setattr__(self, "behavior", beh)
        object.__setattr__(self, "outcome_probs", probs)
        object.__setattr__(self, "outcome_rewards", rews)
        if self.r_bounds is None:
            allr = np.concatenate([r.ravel() for r in rews])
            object.__setattr__(self, "r_bounds", (float(allr.min()), float(allr.max())))

    @property
    def k(self):
        return self.behavior.shape[1]

    @property
    def m(self) -> int:
        return self.context_probs.shape[0]

    @property
    def contexts(self) -> np.ndarray:
        return np.arange(self.m, dtype=np.float64).reshape(-1, 1)

    @property
    def q_table(self) -> np.ndarray:
        return np.stack([p @ r for p, r in zip(self.outcome_probs, self.outcome_rewards)])

    def sample_contexts(self, n, rng):
        return rng.choice(self.m, size=n, p=self.context_probs).astype(np.float64).reshape(-1, 1)

    def sample_rewards(self, contexts, rng):
        idx = _context_index(contexts, self.m)
        out = np.empty((idx.shape[0], self.k))
        u = rng.random(idx.shape[0])
        for i, j in enumerate(idx):
            o = min(int(np.searchsorted(np.cumsum(self.outcome_probs[j]), u[i], side="right")),
                    len(self.outcome_probs[j]) - 1)
            out[i] = self.outcome_rewards[j][o]
        return out

    def true_q(self, contexts):
        return self.q_table[_context_index(contexts, self.m)]

    def reward_outcomes(self, context):
        j = int(_context_index(context, self.m)[0])
        return list(zip(self.outcome_probs[j].tolist(), self.outcome_rewards[j]))

    def default_behavior(self):
        return TableBehavior(self.behavior)

    @property
    def reward_range(self):
        return self.r_bounds


def random_discrete_env(
    m: int,
    k: int,
    rng: np.random.Generator,
    tau: float | None = None,
    n_outcomes: int = 2,
    reward_low: float = 0.0,
    reward_high: float = 1.0,
) -> DiscreteSpec:
    """Random finite environment with behavior floor ``tau`` (uniform when ``None``)."""
    px = rng.dirichlet(np.ones(m))
    oprobs = [rng.dirichlet(np.ones(n_outcomes)) for _ in range(m)]
    orews = [rng.uniform(reward_low, reward_high, size=(n_outcomes, k)) for _ in range(m)]
    if tau is None:
        beh = np.full((m, k), 1.0 / k)
    else:
        if not 0 < tau <= 1.0 / k:
            raise DomainError("tau must lie in (0, 1/k]")
        beh = tau + (1 - k * tau) * rng.dirichlet(np.ones(k), size=m)
    return DiscreteSpec(px, oprobs, orews, beh, r_bounds=(reward_low, reward_high))


def dr_instability_env() -> DiscreteSpec:
    """One context, ``r = (0, 1)`` or ``(0, -2)`` with probability 1/2, uniform behavior."""
    return DiscreteSpec(
        np.array([1.0]),
        [np.array([0.5, 0.5])],
        [np.array([[0.0, 1.0], [0.0, -2.0]])],
        np.array([[0.5, 0.5]]),
    )


# ---------------------------------------------------------------------------
# Sampling operations
# ---------------------------------------------------------------------------

def _check_n(n: int) -> None:
    if n < 1:
        raise DomainError("n must be at least 1")


def sample_dataset(
    env: Environment,
    n: int,
    rng: np.random.Generator,
    behavior: BehaviorPolicy | None = None,
) -> Dataset:
    """Draw ``n`` i.i.d. logged rounds: contexts, then rewards, then actions."""
    _check_n(n)
    behavior = env.default_behavior() if behavior is None else behavior
    if behavior.n_actions != env.k:
        raise DimensionError("behavior and environment disagree on K")
    x = env.sample_contexts(n, rng)
    r = env.sample_rewards(x, rng)
    a, p = behavior.sample(x, rng)
    bounds = env.reward_range
    if bounds is None:
        bounds = (float(r.min()), float(r.max()))
    return Dataset(x, r, a, p, behavior.tau, bounds[0], bounds[1])


def gaussian_linear_sample(
    spec: GaussianLinearSpec, behavior: BehaviorPolicy, n: int, rng: np.random.Generator
) -> Dataset:
    return sample_dataset(spec, n, rng, behavior)


def nn_lowerbound_sample(spec: NnLowerBoundSpec, n: int, rng: np.random.Generator) -> Dataset:
    return sample_dataset(spec, n, rng, uniform_behavior(2))


def noisy_classification_construct(
    spec: NoisyClassificationSpec, n: int, rng: np.random.Generator
) -> Dataset:
    """Logged data from the noisy-classification construction."""
    if spec.eta <= 0:
        raise DomainError("the construction needs eta > 0 for strict positivity")
    return sample_dataset(spec, n, rng, NoisyLabelBehavior(spec))


def true_q(env: Environment, x) -> np.ndarray:
    """``Q(x, .)``; returns a K-vector for one context or ``(n, K)`` for a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim <= 1:
        return env.true_q(x.reshape(1, -1))[0]
    return env.true_q(x)


def resample_actions(
    S: Dataset,
    behavior: BehaviorPolicy,
    rng: np.random.Generator,
    env: Environment | None = None,
) -> Dataset:
    """Same contexts and reward vectors, fresh actions from ``behavior``."""
    if behavior.n_actions != S.k:
        raise DimensionError("behavior and dataset disagree on K")
    a, p = behavior.sample(S.contexts, rng)
    return S.with_actions(a, p, tau=behavior.tau)


def classification_to_bandit(
    examples: Sequence[tuple[np.ndarray, int]],
    k: int,
    behavior: BehaviorPolicy,
    rng: np.random.Generator,
) -> Dataset:
    """Reward 1 for the true label's action, 0 otherwise."""
    if not examples:
        raise DomainError("no examples")
    x = np.stack([np.asarray(e[0], dtype=np.float64).ravel() for e in examples])
    labels = np.array([int(e[1]) for e in examples])
    if (labels < 0).any() or (labels >= k).any():
        raise DomainError("label out of range")
    r = np.zeros((len(labels), k))
    r[np.arange(len(labels)), labels] = 1.0
    a, p = behavior.sample(x, rng)
    return Dataset(x, r, a, p, behavior.tau, 0.0, 1.0)


def optimal_policy(env: Environment) -> GreedyPolicy:
    """Deterministic greedy policy on the true mean rewards."""
    return GreedyPolicy(TrueQ(env))
