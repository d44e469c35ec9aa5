"""Approximation / estimation / bandit regret decomposition over independent seeds.

For each seed ``j`` a fresh environment, training set ``S_j`` and test set
``T_j`` are drawn.  A full-feedback policy and each bandit learner are trained
on ``S_j`` and all of them are scored on ``T_j`` with the full reward vectors.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..core import Dataset, DomainError, derive_seed, parallel_map, substream
from ..envs import Environment, GaussianLinearSpec, optimal_policy, sample_dataset, uniform_behavior
from ..learners import LINEAR, MlpQ
from ..objectives import full_feedback_value, value_squared_loss

Trainer = Callable[[Dataset, int], object]


@dataclass(frozen=True)
class GaussianLinearFactory:
    """Draws a fresh ``theta ~ U[0,1]^{K x d}`` per seed."""

    k: int = 2
    d: int = 10
    eps: float = 0.1

    def __call__(self, rng: np.random.Generator) -> GaussianLinearSpec:
        return GaussianLinearSpec.random(self.k, self.d, self.eps, rng)


def _fit(trainer, S: Dataset, seed: int):
    """Returns ``(policy, per-point train MSE or None)``."""
    if hasattr(trainer, "fit"):
        policy, _, params = trainer.fit(S, seed)
        if params is not None and getattr(params, "head", None) == LINEAR:
            return policy, value_squared_loss(MlpQ(params), S) / S.n
        return policy, None
    return trainer(S, seed), None


def _one_seed(job) -> dict:
    j, factory, learners, full_learner, n_train, n_test, master_seed = job
    rng = substream(master_seed, "decompose-data", j)
    env: Environment = factory(rng)
    behavior = uniform_behavior(env.k)
    S = sample_dataset(env, n_train, rng, behavior)
    T = sample_dataset(env, n_test, rng, behavior)
    row = {"seed": j, "v_star": full_feedback_value(optimal_policy(env), T)}
    try:
        pi_f, _ = _fit(full_learner, S, derive_seed(master_seed, "decompose-full", j))
        row["v_full"] = full_feedback_value(pi_f, T)
        row["v_alg"], row["train_mse"] = {}, {}
        for name, trainer in learners.items():
            if trainer is full_learner:
                row["v_alg"][name] = row["v_full"]
                continue
            pi, mse = _fit(trainer, S, derive_seed(master_seed, "decompose-" + name, j))
            row["v_alg"][name] = full_feedback_value(pi, T)
            if mse is not None:
                row["train_mse"][name] = mse
    except Exception as exc:  # a failed seed is excluded and reported, not fatal
        return {"seed": j, "error": f"{type(exc).__name__}: {exc}"}
    return row


def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    half = 1.96 * std / math.sqrt(v.size)
    return {"mean": mean, "std": std, "ci95": [mean - half, mean + half]}


@dataclass
class DecompositionReport:
    algorithms: list[str]
    per_seed: list[dict]
    excluded: list[dict] = field(default_factory=list)

    def _column(self, name: str) -> np.ndarray:
        return np.array([r["v_alg"][name] for r in self.per_seed])

    @property
    def v_star(self) -> np.ndarray:
        return np.array([r["v_star"] for r in self.per_seed])

    @property
    def v_full(self) -> np.ndarray:
        return np.array([r["v_full"] for r in self.per_seed])

    def bandit_errors(self, name: str) -> np.ndarray:
        return self.v_full - self._column(name)

    def estimation_errors(self) -> np.ndarray:
        return self.v_star - self.v_full

    def summary(self) -> dict:
        est = _stats(self.estimation_errors())
        out = {}
        for name in self.algorithms:
            total = _stats(self.v_star - self._column(name))
            bandit = _stats(self.bandit_errors(name))
            out[name] = {
                "approximation": 0.0,
                "estimation": est["mean"],
                "bandit": bandit["mean"],
                "total": total["mean"],
                "bandit_std": bandit["std"],
                "bandit_ci95": bandit["ci95"],
                "total_std": total["std"],
            }
            mses = [r["train_mse"][name] for r in self.per_seed if name in r.get("train_mse", {})]
            if mses:
                out[name]["max_train_mse"] = float(max(mses))
        return out

    def to_dict(self) -> dict:
        summary = self.summary()
        return {
            "algorithms": list(self.algorithms),
            "n_seeds": len(self.per_seed),
            "excluded": self.excluded,
            "per_seed": self.per_seed,
            "mean": {k: {f: v[f] for f in ("approximation", "estimation", "bandit", "total")}
                     for k, v in summary.items()},
            "std": {k: {"bandit": v["bandit_std"], "total": v["total_std"]} for k, v in summary.items()},
            "summary": summary,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def per_seed_csv(self) -> str:
        head = ["seed", "v_star", "v_full"] + ["v_" + a for a in self.algorithms]
        lines = [",".join(head)]
        for r in self.per_seed:
            vals = [r["v_star"], r["v_full"]] + [r["v_alg"][a] for a in self.algorithms]
            lines.append(",".join([str(r["seed"])] + [repr(float(v)) for v in vals]))
        return "\n".join(lines) + "\n"

    def bar_csv(self) -> str:
        lines = ["algorithm,bandit_error,std"]
        s = self.summary()
        for a in self.algorithms:
            lines.append(f"{a},{s[a]['bandit']!r},{s[a]['bandit_std']!r}")
        return "\n".join(lines) + "\n"


def regret_decomposition(
    env_factory: Callable[[np.random.Generator], Environment],
    learners: Mapping[str, Trainer],
    j_seeds: int,
    full_learner: Trainer,
    n_train: int = 100,
    n_test: int = 500,
    master_seed: int = 0,
    jobs: int = 1,
) -> DecompositionReport:
    """Run the decomposition for every learner over ``j_seeds`` seeds.

    Learners are ``(S, seed) -> PolicyModel`` callables; objects with a
    ``fit(S, seed)`` method returning ``(policy, curve, params)`` also report
    their per-point training squared error when they fit a value model.
    Seeds whose training fails are excluded and listed in ``excluded``.
    """
    if j_seeds < 2:
        raise DomainError("need at least two seeds")
    jobs_in = [(j, env_factory, dict(learners), full_learner, n_train, n_test, master_seed)
               for j in range(j_seeds)]
    rows = parallel_map(_one_seed, jobs_in, jobs)
    ok = [r for r in rows if "error" not in r]
    bad = [r for r in rows if "error" in r]
    if len(ok) < 2:
        raise DomainError(f"only {len(ok)} seeds completed: {bad}")
    return DecompositionReport(list(learners), ok, bad)
