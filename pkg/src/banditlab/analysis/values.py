"""True and in-sample policy values from an environment's mean rewards."""
from __future__ import annotations

import numpy as np

from ..core import Dataset, Estimate, PolicyModel, mean_estimate
from ..envs import Environment


def expected_rewards(pi: PolicyModel, env: Environment, contexts) -> np.ndarray:
    """``<Q(x, .), pi(.|x)>`` for each context."""
    x = np.asarray(contexts, dtype=np.float64)
    return np.sum(env.true_q(x) * pi.action_probs(x), axis=1)


def true_value(
    pi: PolicyModel,
    env: Environment,
    n_mc: int = 100_000,
    rng: np.random.Generator | None = None,
) -> Estimate:
    """``V(pi)``; exact on finite context sets, Monte Carlo otherwise."""
    px = getattr(env, "context_probs", None)
    if px is not None:
        return Estimate(float(np.dot(px, expected_rewards(pi, env, env.contexts))), 0.0)
    if rng is None:
        raise ValueError("Monte Carlo value needs an rng")
    return mean_estimate(expected_rewards(pi, env, env.sample_contexts(n_mc, rng)))


def in_sample_value(pi: PolicyModel, S: Dataset, env: Environment) -> float:
    """Mean expected reward of ``pi`` over the training contexts."""
    return float(np.mean(expected_rewards(pi, env, S.contexts)))


def optimal_value(env: Environment, contexts) -> np.ndarray:
    return env.true_q(np.asarray(contexts, dtype=np.float64)).max(axis=1)
