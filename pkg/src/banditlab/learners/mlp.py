"""One-hidden-layer ReLU MLP with manual backprop, trained by momentum SGD."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..core import (
    Dataset,
    DimensionError,
    DomainError,
    GreedyPolicy,
    ParseError,
    PolicyModel,
    QModel,
    fmt_float,
    softmax,
    substream,
)
from ..objectives import (
    DOUBLY_ROBUST,
    FULL_FEEDBACK,
    VALUE_SQUARED,
    ObjectiveSpec,
    Targets,
    prepare_targets,
    targets_gradient,
)

SOFTMAX = "softmax"
LINEAR = "linear"
PARAM_NAMES = ("w1", "b1", "w2", "b2")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        self.epoch = epoch
        super().__init__(f"non-finite objective {value} at epoch {epoch}")


@dataclass
class MlpParams:
    w1: np.ndarray  # (hidden, d)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (K, hidden)
    b2: np.ndarray  # (K,)
    head: str = SOFTMAX

    def __post_init__(self):
        if self.head not in (SOFTMAX, LINEAR):
            raise DomainError(f"unknown head {self.head!r}")
        h, d = self.w1.shape
        if h < 1 or self.b1.shape != (h,) or self.w2.shape[1] != h or self.b2.shape != (self.w2.shape[0],):
            raise DimensionError("inconsistent MLP parameter shapes")

    @classmethod
    def init(cls, d: int, hidden: int, k: int, head: str, rng: np.random.Generator) -> "MlpParams":
        """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` per layer."""
        s1, s2 = 1.0 / np.sqrt(d), 1.0 / np.sqrt(hidden)
        return cls(
            rng.uniform(-s1, s1, (hidden, d)),
            rng.uniform(-s1, s1, hidden),
            rng.uniform(-s2, s2, (k, hidden)),
            rng.uniform(-s2, s2, k),
            head,
        )

    @property
    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def k(self) -> int:
        return self.w2.shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams(*(a.copy() for a in self.arrays), head=self.head)

    def equals(self, other: "MlpParams") -> bool:
        return self.head == other.head and all(
            np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays)
        )


def _forward(params: MlpParams, x: np.ndarray):
    pre = x @ params.w1.T + params.b1
    hid = np.maximum(pre, 0.0)
    raw = hid @ params.w2.T + params.b2
    return pre, hid, raw


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Q values (linear head) or action probabilities (softmax head) for ``(n, d)`` inputs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != params.d:
        raise DimensionError(f"input dimension {x.shape[1]} != {params.d}")
    raw = _forward(params, x)[2]
    return softmax(raw) if params.head == SOFTMAX else raw


def _backward(params: MlpParams, x, pre, hid, g_raw):
    g_w2 = g_raw.T @ hid
    g_b2 = g_raw.sum(axis=0)
    g_hid = (g_raw @ params.w2) * (pre > 0)
    g_w1 = g_hid.T @ x
    g_b1 = g_hid.sum(axis=0)
    return [g_w1, g_b1, g_w2, g_b2]


def batch_objective_and_grads(params: MlpParams, x: np.ndarray, targets: Targets):
    """Mean objective on a batch and its gradient with respect to every parameter."""
    pre, hid, raw = _forward(params, x)
    out = softmax(raw) if params.head == SOFTMAX else raw
    value, g_raw = targets_gradient(out, targets)
    return value, _backward(params, x, pre, hid, g_raw)


class MlpPolicy(PolicyModel):
    def __init__(self, params: MlpParams):
        if params.head != SOFTMAX:
            raise DomainError("MlpPolicy needs a softmax head")
        self.params = params
        self.n_actions = params.k

    def action_probs(self, contexts):
        return mlp_forward(self.params, contexts)


class MlpQ(QModel):
    def __init__(self, params: MlpParams):
        if params.head != LINEAR:
            raise DomainError("MlpQ needs a linear head")
        self.params = params
        self.n_actions = params.k

    def q_values(self, contexts):
        return mlp_forward(self.params, contexts)


def as_policy(params: MlpParams) -> PolicyModel:
    """Softmax nets are policies; linear nets act greedily on their Q values."""
    return MlpPolicy(params) if params.head == SOFTMAX else GreedyPolicy(MlpQ(params))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Momentum SGD settings; defaults follow the synthetic-experiment protocol."""

    lr_schedule: tuple = ((0, 0.01), (200, 0.001))
    momentum: float = 0.9
    batch_size: int = 10
    weight_decay: float = 1e-4
    epochs: int = 1000
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        sched = tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        if not sched or sched[0][0] != 0:
            raise DomainError("lr_schedule must start at epoch 0")
        if any(lr < 0 for _, lr in sched):
            raise DomainError("learning rates must be non-negative")
        if not 0 <= self.momentum < 1:
            raise DomainError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise DomainError("batch_size must be >= 1 and epochs >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise DomainError("grad_clip must be positive")
        object.__setattr__(self, "lr_schedule", tuple(sorted(sched)))

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr


@dataclass
class LearningCurve:
    epoch: list = field(default_factory=list)
    train_obj: list = field(default_factory=list)
    train_value: list = field(default_factory=list)
    test_value: list = field(default_factory=list)

    def append(self, epoch, train_obj, train_value, test_value):
        self.epoch.append(epoch)
        self.train_obj.append(train_obj)
        self.train_value.append(train_value)
        self.test_value.append(test_value)

    def __len__(self):
        return len(self.epoch)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_obj", "train_value", "test_value"])
        for row in zip(self.epoch, self.train_obj, self.train_value, self.test_value):
            w.writerow([row[0]] + [fmt_float(v) if v is not None else "" for v in row[1:]])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        Path(path).write_text(self.csv_text(), encoding="utf-8")


def _policy_value(params: MlpParams, S: Dataset, env) -> float:
    """In-sample value of the net's policy: true means if ``env`` is known, else logged vectors."""
    pi = as_policy(params)
    probs = pi.action_probs(S.contexts)
    means = env.true_q(S.contexts) if env is not None else S.rewards
    return float(np.mean(np.sum(probs * means, axis=1)))


def sgd_train(
    params: MlpParams,
    dataset: Dataset,
    objective: ObjectiveSpec,
    cfg: TrainConfig,
    test_set: Dataset | None = None,
    env=None,
    record_curve: bool = True,
) -> tuple[MlpParams, LearningCurve]:
    """Train a copy of ``params``; policy objectives are maximized, the value loss minimized.

    Updates follow the usual heavy-ball form with weight decay folded into the
    gradient: ``v <- mu v + (g + wd w)``, ``w <- w - lr v``.  Minibatches are
    reshuffled every epoch from the stream seeded by ``cfg.seed``.
    """
    if objective.kind == VALUE_SQUARED and params.head != LINEAR:
        raise DomainError("value objective needs a linear head")
    if objective.is_policy and params.head != SOFTMAX:
        raise DomainError("policy objectives need a softmax head")
    if params.d != dataset.d or params.k != dataset.k:
        raise DimensionError("network and dataset disagree on d or K")
    p = params.copy()
    arrays = p.arrays
    vel = [np.zeros_like(a) for a in arrays]
    targets = prepare_targets(objective, dataset)
    x_all = np.asarray(dataset.contexts)
    sign = -1.0 if objective.maximize else 1.0
    rng = substream(cfg.seed, "sgd-shuffle")
    curve = LearningCurve()
    n, bs = dataset.n, cfg.batch_size
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            value, grads = batch_objective_and_grads(p, x_all[idx], targets.take(idx))
            total += value * len(idx)
            if sign < 0:
                grads = [-g for g in grads]
            if cfg.weight_decay:
                grads = [g + cfg.weight_decay * a for g, a in zip(grads, arrays)]
            if cfg.grad_clip is not None:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if norm > cfg.grad_clip:
                    grads = [g * (cfg.grad_clip / norm) for g in grads]
            for a, v, g in zip(arrays, vel, grads):
                v *= cfg.momentum
                v += g
                a -= lr * v
        train_obj = total / n
        if not np.isfinite(train_obj) or not all(np.all(np.isfinite(a)) for a in arrays):
            raise TrainingDiverged(epoch, train_obj)
        if record_curve:
            test_value = _policy_value(p, test_set, env) if test_set is not None else None
            curve.append(epoch, train_obj, _policy_value(p, dataset, env), test_value)
    return p, curve


def batch_objective(params: MlpParams, x: np.ndarray, targets: Targets) -> float:
    return batch_objective_and_grads(params, x, targets)[0]


def grad_check(
    params: MlpParams,
    objective: ObjectiveSpec,
    batch: Dataset,
    step: float = 1e-5,
    margin: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central finite differences.

    The relative error is ``max|g_analytic - g_numeric| / max|g_numeric|``.  If
    any ReLU pre-activation on the batch sits within ``margin`` of zero, the
    offending first-layer biases are nudged away before checking.
    """
    if batch.n < 1:
        raise DomainError("empty batch")
    rng = np.random.default_rng(0) if rng is None else rng
    p = params.copy()
    x = np.asarray(batch.contexts)
    for _ in range(1000):
        pre = x @ p.w1.T + p.b1
        close = np.abs(pre) < margin
        if not close.any():
            break
        units = np.flatnonzero(close.any(axis=0))
        p.b1[units] += rng.uniform(5, 10, size=units.size) * margin * rng.choice([-1, 1], size=units.size)
    else:
        raise RuntimeError("could not move pre-activations away from the ReLU kink")
    targets = prepare_targets(objective, batch)
    _, analytic = batch_objective_and_grads(p, x, targets)
    numeric = []
    for a in p.arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + step
            up = batch_objective(p, x, targets)
            flat[j] = old - step
            down = batch_objective(p, x, targets)
            flat[j] = old
            gflat[j] = (up - down) / (2 * step)
        numeric.append(g)
    err = max(float(np.max(np.abs(ga - gn))) for ga, gn in zip(analytic, numeric))
    scale = max(float(np.max(np.abs(gn))) for gn in numeric)
    return err / scale if scale > 0 else err


# ---------------------------------------------------------------------------
# Learners: dataset -> policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpLearner:
    """Fits an MLP to a dataset under one objective and returns its policy.

    For ``doubly_robust`` a Q network is fitted first (value objective) and the
    policy is then trained on the DR objective with that Q.
    """

    kind: str = VALUE_SQUARED
    baseline_lambda: float = 0.0
    hidden: int = 512
    train: TrainConfig = TrainConfig()

    def fit(self, S: Dataset, seed: int, test_set: Dataset | None = None, env=None,
            record_curve: bool = False):
        cfg = replace(self.train, seed=seed)
        if self.kind in (VALUE_SQUARED, DOUBLY_ROBUST):
            init = MlpParams.init(S.d, self.hidden, S.k, LINEAR, substream(seed, "init-q"))
            q_params, curve = sgd_train(init, S, ObjectiveSpec(VALUE_SQUARED), cfg, test_set, env, record_curve)
            if self.kind == VALUE_SQUARED:
                return as_policy(q_params), curve, q_params
            objective = ObjectiveSpec(DOUBLY_ROBUST, q_model=MlpQ(q_params))
        else:
            objective = ObjectiveSpec(self.kind, self.baseline_lambda)
        init = MlpParams.init(S.d, self.hidden, S.k, SOFTMAX, substream(seed, "init-pi"))
        pi_params, curve = sgd_train(init, S, objective, cfg, test_set, env, record_curve)
        return as_policy(pi_params), curve, pi_params

    def __call__(self, S: Dataset, seed: int) -> PolicyModel:
        return self.fit(S, seed)[0]


def full_feedback_learner(hidden: int = 512, train: TrainConfig = TrainConfig()) -> MlpLearner:
    return MlpLearner(FULL_FEEDBACK, 0.0, hidden, train)


# ---------------------------------------------------------------------------
# Checkpoints in the dataset-style text format
# ---------------------------------------------------------------------------

def params_dumps(params: MlpParams) -> str:
    lines = [f"d={params.d} hidden={params.hidden} k={params.k} head={params.head}"]
    for name, a in zip(PARAM_NAMES, params.arrays):
        lines.append(name + "," + ",".join(fmt_float(v) for v in a.ravel()))
    return "\n".join(lines) + "\n"


def save_params(params: MlpParams, path) -> None:
    Path(path).write_text(params_dumps(params), encoding="utf-8")


def load_params(path) -> MlpParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        hdr = dict(tok.split("=", 1) for tok in lines[0].split())
        d, h, k, head = int(hdr["d"]), int(hdr["hidden"]), int(hdr["k"]), hdr["head"]
    except (IndexError, KeyError, ValueError) as exc:
        raise ParseError(f"bad checkpoint header: {exc}", 1) from None
    shapes = {"w1": (h, d), "b1": (h,), "w2": (k, h), "b2": (k,)}
    arrays = {}
    for lineno, line in enumerate(lines[1:], start=2):
        name, _, rest = line.partition(",")
        if name not in shapes:
            raise ParseError(f"unknown parameter {name!r}", lineno)
        try:
            vals = np.array([float(v) for v in rest.split(",")])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if vals.size != int(np.prod(shapes[name])):
            raise ParseError(f"{name} has {vals.size} values, expected {int(np.prod(shapes[name]))}", lineno)
        arrays[name] = vals.reshape(shapes[name])
    if set(arrays) != set(shapes):
        raise ParseError(f"missing parameters {sorted(set(shapes) - set(arrays))}")
    return MlpParams(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"], head)
