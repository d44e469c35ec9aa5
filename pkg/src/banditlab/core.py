"""Shared domain types, simplex helpers, RNG streams and the dataset text format."""
from __future__ import annotations

import hashlib
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence, TextIO, Union

import numpy as np

# exact-identity checks (normalization, algebraic identities)
IDENTITY_TOL = 1e-9
# metric checks (TV distance, witness optimality)
METRIC_TOL = 1e-12


class DimensionError(ValueError):
    """Array shapes that should agree do not."""


class InvalidValueError(ValueError):
    """A NaN or otherwise unusable numeric input."""


class DomainError(ValueError):
    """An argument outside the operation's domain."""


class ParseError(ValueError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

def substream(master_seed: int, component: str, index: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``hash(master_seed, component, index)``.

    Streams with different ``(component, index)`` are statistically independent,
    so parallel replicates never share state.
    """
    if not 0 <= int(master_seed) < 2**64:
        raise DomainError(f"master_seed must be a 64-bit unsigned integer, got {master_seed}")
    digest = hashlib.blake2b(
        f"{int(master_seed)}|{component}|{int(index)}".encode(), digest_size=16
    ).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def derive_seed(master_seed: int, component: str, index: int = 0) -> int:
    """64-bit child seed, for handing a whole sub-experiment its own master seed."""
    digest = hashlib.blake2b(
        f"{int(master_seed)}|{component}|{int(index)}|seed".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def parallel_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally over a process pool; order preserved."""
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Simplex arithmetic
# ---------------------------------------------------------------------------

def check_distribution(probs, tol: float = IDENTITY_TOL) -> np.ndarray:
    """Validate one distribution (1-D) or a batch of them (rows)."""
    p = np.asarray(probs, dtype=np.float64)
    if np.isnan(p).any():
        raise InvalidValueError("distribution contains NaN")
    if (p < 0).any():
        raise InvalidValueError("distribution has negative entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise InvalidValueError("distribution does not sum to 1")
    return p


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    # renormalize once more so rows sum to 1 within rounding
    return p / p.sum(axis=-1, keepdims=True)


def tv_distance(p, q) -> float:
    """Total-variation distance ``0.5 * sum |p - q|`` between two distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(0.5 * np.abs(p - q).sum())


def greedy_action(values) -> int:
    """Index of the largest entry; ties go to the lowest index."""
    v = np.asarray(values, dtype=np.float64)
    if np.isnan(v).any():
        raise InvalidValueError("values contain NaN")
    return int(np.argmax(v))


def greedy_actions(values: np.ndarray) -> np.ndarray:
    """Row-wise :func:`greedy_action`."""
    v = np.asarray(values, dtype=np.float64)
    if np.isnan(v).any():
        raise InvalidValueError("values contain NaN")
    return np.argmax(v, axis=-1)


def one_hot(actions, k: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros((actions.shape[0], k))
    out[np.arange(actions.shape[0]), actions] = 1.0
    return out


# ---------------------------------------------------------------------------
# Policies and Q models
# ---------------------------------------------------------------------------

class PolicyModel:
    """Maps a batch of contexts ``(n, d)`` to action distributions ``(n, K)``."""

    n_actions: int

    def action_probs(self, contexts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, context) -> np.ndarray:
        """Distribution at a single context."""
        x = np.asarray(context, dtype=np.float64).reshape(1, -1)
        return check_distribution(self.action_probs(x)[0])


class QModel:
    """Maps a batch of contexts ``(n, d)`` to predicted action values ``(n, K)``."""

    n_actions: int

    def q_values(self, contexts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, context) -> np.ndarray:
        x = np.asarray(context, dtype=np.float64).reshape(1, -1)
        q = self.q_values(x)[0]
        if not np.all(np.isfinite(q)):
            raise InvalidValueError("Q output is not finite")
        return q


class GreedyPolicy(PolicyModel):
    """Deterministic argmax policy of a Q model (lowest index on ties)."""

    def __init__(self, q_model: QModel):
        self.q_model = q_model
        self.n_actions = q_model.n_actions

    def action_probs(self, contexts):
        return one_hot(greedy_actions(self.q_model.q_values(contexts)), self.n_actions)


class ConstantPolicy(PolicyModel):
    """Same distribution at every context."""

    def __init__(self, probs):
        self.probs = check_distribution(np.asarray(probs, dtype=np.float64))
        self.n_actions = self.probs.shape[0]

    def action_probs(self, contexts):
        n = np.asarray(contexts).shape[0]
        return np.tile(self.probs, (n, 1))

    def __repr__(self):
        return f"ConstantPolicy({self.probs.tolist()})"


class UniformPolicy(ConstantPolicy):
    def __init__(self, k: int):
        super().__init__(np.full(k, 1.0 / k))


class FunctionPolicy(PolicyModel):
    """Wraps a vectorized callable ``contexts -> probs``."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], n_actions: int):
        self.fn = fn
        self.n_actions = n_actions

    def action_probs(self, contexts):
        return np.asarray(self.fn(np.asarray(contexts, dtype=np.float64)), dtype=np.float64)


class ZeroQ(QModel):
    def __init__(self, k: int):
        self.n_actions = k

    def q_values(self, contexts):
        return np.zeros((np.asarray(contexts).shape[0], self.n_actions))


def mean_tv(pi_a: PolicyModel, pi_b: PolicyModel, contexts, reduce: str = "mean") -> float:
    """Average (or maximum) TV distance between two policies over ``contexts``."""
    x = np.asarray(contexts, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[0] == 0:
        raise DomainError("mean_tv needs at least one context")
    pa = pi_a.action_probs(x)
    pb = pi_b.action_probs(x)
    if pa.shape != pb.shape:
        raise DimensionError(f"policy outputs differ in shape: {pa.shape} vs {pb.shape}")
    per_context = 0.5 * np.abs(pa - pb).sum(axis=1)
    if reduce == "mean":
        return float(per_context.mean())
    if reduce == "max":
        return float(per_context.max())
    raise ValueError(f"unknown reduce {reduce!r}")


# ---------------------------------------------------------------------------
# Logged data
# ---------------------------------------------------------------------------

class LoggedInteraction(NamedTuple):
    """One logged round ``(x, r, a, p)``."""

    context: np.ndarray
    reward: np.ndarray
    action: int
    propensity: float

    @property
    def observed_reward(self) -> float:
        return float(self.reward[self.action])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=a.dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """A logged bandit dataset stored column-wise.

    Parameters
    ----------
    contexts : array of shape (N, d)
    rewards : array of shape (N, K)
        Full reward vectors; bandit learners only read ``rewards[i, actions[i]]``.
    actions : int array of shape (N,)
    propensities : array of shape (N,)
        ``beta(a_i | x_i)`` for the logged action.
    tau : float
        Declared positivity floor; every propensity must be at least ``tau``.
    r_min, r_max : float
        Declared reward range.
    """

    contexts: np.ndarray
    rewards: np.ndarray
    actions: np.ndarray
    propensities: np.ndarray
    tau: float
    r_min: float
    r_max: float

    def __post_init__(self):
        x = np.asarray(self.contexts, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        r = np.asarray(self.rewards, dtype=np.float64)
        a = np.asarray(self.actions)
        p = np.asarray(self.propensities, dtype=np.float64)
        if x.ndim != 2 or r.ndim != 2:
            raise DimensionError("contexts and rewards must be 2-D")
        n = x.shape[0]
        if n < 1:
            raise DomainError("a dataset needs at least one record")
        if r.shape[0] != n or a.shape != (n,) or p.shape != (n,):
            raise DimensionError("record fields disagree on N")
        if a.size and not np.all(a == np.round(a)):
            raise DomainError("actions must be integers")
        a = a.astype(np.int64)
        k = r.shape[1]
        if k < 1 or (a < 0).any() or (a >= k).any():
            raise DomainError("action index out of range")
        for name, arr in (("contexts", x), ("rewards", r), ("propensities", p)):
            if not np.all(np.isfinite(arr)):
                raise InvalidValueError(f"{name} must be finite")
        if (p <= 0).any() or (p > 1).any():
            raise DomainError("propensities must lie in (0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise DomainError("tau must lie in [0, 1]")
        if (p < self.tau).any():
            raise DomainError("propensity below the declared positivity floor tau")
        if not self.r_min <= self.r_max:
            raise DomainError("r_min must not exceed r_max")
        if (r < self.r_min).any() or (r > self.r_max).any():
            raise DomainError("reward outside [r_min, r_max]")
        object.__setattr__(self, "contexts", _frozen(x))
        object.__setattr__(self, "rewards", _frozen(r))
        object.__setattr__(self, "actions", _frozen(a))
        object.__setattr__(self, "propensities", _frozen(p))
        object.__setattr__(self, "tau", float(self.tau))
        object.__setattr__(self, "r_min", float(self.r_min))
        object.__setattr__(self, "r_max", float(self.r_max))

    @property
    def n(self) -> int:
        return self.contexts.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def d(self) -> int:
        return self.contexts.shape[1]

    @property
    def k(self) -> int:
        return self.rewards.shape[1]

    @property
    def delta_r(self) -> float:
        return self.r_max - self.r_min

    @property
    def observed_rewards(self) -> np.ndarray:
        return self.rewards[np.arange(self.n), self.actions]

    @property
    def records(self) -> list[LoggedInteraction]:
        return list(iter(self))

    def __iter__(self) -> Iterator[LoggedInteraction]:
        for i in range(self.n):
            yield LoggedInteraction(
                self.contexts[i], self.rewards[i], int(self.actions[i]), float(self.propensities[i])
            )

    def bandit_view(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """``S_B``: contexts, observed rewards, actions, propensities."""
        return self.contexts, self.observed_rewards, self.actions, self.propensities

    def full_view(self) -> tuple[np.ndarray, np.ndarray]:
        """``S_F``: contexts and full reward vectors."""
        return self.contexts, self.rewards

    def with_actions(self, actions, propensities, tau: float | None = None) -> "Dataset":
        return Dataset(
            self.contexts, self.rewards, actions, propensities,
            self.tau if tau is None else tau, self.r_min, self.r_max,
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.contexts[idx], self.rewards[idx], self.actions[idx], self.propensities[idx],
            self.tau, self.r_min, self.r_max,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.contexts, other.contexts)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.propensities, other.propensities)
            and (self.tau, self.r_min, self.r_max) == (other.tau, other.r_min, other.r_max)
        )

    __hash__ = None


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def dataset_write(S: Dataset, sink: Union[str, os.PathLike, TextIO]) -> None:
    """Write ``S`` in the text format: one header line, then one CSV row per record."""
    lines = [
        f"d={S.d} k={S.k} tau={fmt_float(S.tau)} rmin={fmt_float(S.r_min)} rmax={fmt_float(S.r_max)}"
    ]
    for i in range(S.n):
        fields = [fmt_float(v) for v in S.contexts[i]]
        fields += [fmt_float(v) for v in S.rewards[i]]
        fields.append(str(int(S.actions[i])))
        fields.append(fmt_float(S.propensities[i]))
        lines.append(",".join(fields))
    text = "\n".join(lines) + "\n"
    if isinstance(sink, (str, os.PathLike)):
        Path(sink).write_text(text, encoding="utf-8")
    else:
        sink.write(text)


def _parse_header(line: str) -> dict:
    out = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ParseError(f"bad header token {token!r}", 1)
        out[key] = value
    missing = {"d", "k", "tau", "rmin", "rmax"} - out.keys()
    if missing:
        raise ParseError(f"header missing {sorted(missing)}", 1)
    try:
        return {
            "d": int(out["d"]), "k": int(out["k"]), "tau": float(out["tau"]),
            "rmin": float(out["rmin"]), "rmax": float(out["rmax"]),
        }
    except ValueError as exc:
        raise ParseError(f"bad header value: {exc}", 1) from None


def dataset_read(source: Union[str, os.PathLike, TextIO]) -> Dataset:
    """Parse a dataset file; errors name the offending line."""
    if isinstance(source, (str, os.PathLike)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    h = _parse_header(lines[0])
    d, k = h["d"], h["k"]
    width = d + k + 2
    xs, rs, acts, props = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != width:
            raise ParseError(f"expected {width} fields, found {len(fields)}", lineno)
        try:
            x = [float(f) for f in fields[:d]]
            r = [float(f) for f in fields[d:d + k]]
            a = int(fields[d + k])
            p = float(fields[d + k + 1])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if not 0 <= a < k:
            raise ParseError(f"action {a} out of range [0, {k})", lineno)
        if not (0 < p <= 1) or p < h["tau"]:
            raise ParseError(f"propensity {p} violates (0, 1] or tau={h['tau']}", lineno)
        if any(not (h["rmin"] <= v <= h["rmax"]) for v in r):
            raise ParseError("reward outside [rmin, rmax]", lineno)
        xs.append(x)
        rs.append(r)
        acts.append(a)
        props.append(p)
    if not xs:
        raise ParseError("no records", len(lines))
    try:
        return Dataset(
            np.array(xs).reshape(-1, d), np.array(rs).reshape(-1, k), np.array(acts),
            np.array(props), h["tau"], h["rmin"], h["rmax"],
        )
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def dataset_dumps(S: Dataset) -> str:
    buf = io.StringIO()
    dataset_write(S, buf)
    return buf.getvalue()



class Estimate(NamedTuple):
    """Monte Carlo (or exact, with ``std_err == 0``) estimate of a scalar."""

    mean: float
    std_err: float = 0.0

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.mean - 1.96 * self.std_err, self.mean + 1.96 * self.std_err)

    def __float__(self) -> float:
        return float(self.mean)


def mean_estimate(samples) -> Estimate:
    s = np.asarray(samples, dtype=np.float64)
    if s.size < 2:
        return Estimate(float(s.mean()), 0.0)
    return Estimate(float(s.mean()), float(s.std(ddof=1) / np.sqrt(s.size)))
