"""Batch experiment runner.

Usage::

    banditlab <experiment> --config <path> [--seed <u64>] [--out <dir>] [--jobs <n>]

The config is TOML.  A ``manifest.json`` written by a previous run is also
accepted as ``--config`` and re-runs the recorded configuration.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .analysis import (
    appendixF_coverage_test,
    constant_policy_class,
    dr_equivalence_check,
    regret_decomposition,
    theorem1_check,
    theorem2_empirical_check,
    theorem3_experiment,
    theorem6_identity_check,
)
from .analysis.decomposition import GaussianLinearFactory
from .core import dataset_dumps, derive_seed, substream
from .envs import (
    GaussianLinearSpec,
    NnLowerBoundSpec,
    NoisyClassificationSpec,
    random_discrete_env,
    sample_dataset,
    uniform_behavior,
)
from .learners import MlpLearner, TabularQ, TrainConfig, full_feedback_learner, params_dumps
from .objectives import KINDS
from .stability import tv_matrix_csv, tv_resampling_experiment, tv_summary

EXPERIMENTS = ("gen-data", "train", "stability-tv", "decompose", "theorem3", "bounds", "verify-all")
REQUIRED = {
    "gen-data": ("env",),
    "train": ("env", "objective", "trainer"),
    "stability-tv": ("env", "trainer"),
    "decompose": ("env", "trainer"),
    "theorem3": (),
    "bounds": (),
    "verify-all": (),
}
ENV_KINDS = ("gaussian_linear", "nn_lowerbound", "noisy_classification")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_UNKNOWN_EXPERIMENT = 3
EXIT_OUTPUT = 4
EXIT_CHECKS_FAILED = 5


class ConfigError(ValueError):
    code = EXIT_CONFIG
    kind = "config_error"


class UnknownExperimentError(ValueError):
    code = EXIT_UNKNOWN_EXPERIMENT
    kind = "unknown_experiment"


class OutputDirError(OSError):
    code = EXIT_OUTPUT
    kind = "unwritable_output_dir"


def git_blob_sha1(data: bytes) -> str:
    """Content hash computed the way ``git hash-object`` does."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def config_hash(cfg: dict) -> str:
    """Hash of the config minus ``output_dir``, which does not affect results."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return git_blob_sha1(json.dumps(body, sort_keys=True).encode())


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def load_config(path) -> dict:
    """Read a TOML config, or the ``config`` block of a manifest."""
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if p.suffix == ".json":
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from None
        if "config" not in doc:
            raise ConfigError(f"{path} is not a manifest (no 'config' key)")
        return doc["config"]
    try:
        return tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"section [{name}] must be a table")
    return sec


def _get(sec: dict, key: str, typ, default, section: str):
    val = sec.get(key, default)
    if typ is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if not isinstance(val, typ) or isinstance(val, bool) and typ is not bool:
        raise ConfigError(f"[{section}] {key} must be {typ.__name__}, got {val!r}")
    return val


def resolve_config(cfg: dict, experiment: str, seed: int | None, out: str | None) -> dict:
    """Validate sections for ``experiment`` and apply command-line overrides."""
    if experiment not in EXPERIMENTS:
        raise UnknownExperimentError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    cfg = copy.deepcopy(cfg)
    declared = cfg.get("experiment", experiment)
    if declared != experiment:
        raise ConfigError(f"config declares experiment {declared!r} but {experiment!r} was requested")
    cfg["experiment"] = experiment
    for name in REQUIRED[experiment]:
        if name not in cfg:
            raise ConfigError(f"missing section [{name}] required by {experiment}")
    seeds = _section(cfg, "seeds")
    if seed is not None:
        seeds["master_seed"] = seed
    master = _get(seeds, "master_seed", int, 0, "seeds")
    if not 0 <= master < 2 ** 64:
        raise ConfigError("[seeds] master_seed must be a 64-bit unsigned integer")
    seeds["master_seed"] = master
    cfg["seeds"] = seeds
    if out is not None:
        cfg["output_dir"] = out
    elif os.environ.get("OUTPUT_DIR"):
        cfg["output_dir"] = os.environ["OUTPUT_DIR"]
    cfg.setdefault("output_dir", "out")
    if "env" in cfg:
        kind = _get(_section(cfg, "env"), "kind", str, "gaussian_linear", "env")
        if kind not in ENV_KINDS:
            raise ConfigError(f"[env] kind must be one of {ENV_KINDS}, got {kind!r}")
    if "objective" in cfg:
        kind = _get(_section(cfg, "objective"), "kind", str, "", "objective")
        if kind not in KINDS:
            raise ConfigError(f"[objective] kind must be one of {KINDS}, got {kind!r}")
    return cfg


def build_train_config(cfg: dict, seed: int = 0) -> tuple[int, TrainConfig]:
    sec = _section(cfg, "trainer")
    schedule = sec.get("lr_schedule", [[0, 0.01], [200, 0.001]])
    try:
        schedule = tuple((int(e), float(lr)) for e, lr in schedule)
    except (TypeError, ValueError):
        raise ConfigError("[trainer] lr_schedule must be a list of [epoch, lr] pairs") from None
    clip = _get(sec, "grad_clip", float, 0.0, "trainer")
    try:
        tc = TrainConfig(
            lr_schedule=schedule,
            momentum=_get(sec, "momentum", float, 0.9, "trainer"),
            batch_size=_get(sec, "batch_size", int, 10, "trainer"),
            weight_decay=_get(sec, "weight_decay", float, 1e-4, "trainer"),
            epochs=_get(sec, "epochs", int, 1000, "trainer"),
            grad_clip=clip if clip > 0 else None,
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"[trainer] {exc}") from None
    return _get(sec, "hidden", int, 512, "trainer"), tc


def build_env(cfg: dict, rng: np.random.Generator):
    sec = _section(cfg, "env")
    kind = sec.get("kind", "gaussian_linear")
    try:
        if kind == "gaussian_linear":
            k = _get(sec, "k", int, 2, "env")
            d = _get(sec, "d", int, 10, "env")
            return GaussianLinearSpec.random(k, d, _get(sec, "eps", float, 0.1, "env"), rng)
        if kind == "nn_lowerbound":
            return NnLowerBoundSpec(_get(sec, "delta_r", float, 1.0, "env"))
        return NoisyClassificationSpec(_get(sec, "eta", float, 0.25, "env"),
                                       _get(sec, "c_r", float, 1.0, "env"),
                                       d=_get(sec, "d", int, 2, "env"))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[env] {exc}") from None


def _learner(kind: str, lam: float, hidden: int, tc: TrainConfig) -> MlpLearner:
    return MlpLearner(kind, lam, hidden, tc)


# ---------------------------------------------------------------------------
# Experiments; each returns ({filename: text}, report dict)
# ---------------------------------------------------------------------------

def _run_gen_data(cfg: dict, jobs: int):
    master = cfg["seeds"]["master_seed"]
    rng = substream(master, "gen-data")
    env = build_env(cfg, rng)
    sec = _section(cfg, "env")
    S = sample_dataset(env, _get(sec, "n_train", int, 100, "env"), rng)
    T = sample_dataset(env, _get(sec, "n_test", int, 500, "env"), rng)
    files = {"train.txt": dataset_dumps(S), "test.txt": dataset_dumps(T)}
    return files, {"n_train": S.n, "n_test": T.n, "k": S.k, "d": S.d, "tau": S.tau}


def _run_train(cfg: dict, jobs: int):
    master = cfg["seeds"]["master_seed"]
    rng = substream(master, "train-data")
    env = build_env(cfg, rng)
    sec = _section(cfg, "env")
    S = sample_dataset(env, _get(sec, "n_train", int, 100, "env"), rng)
    T = sample_dataset(env, _get(sec, "n_test", int, 500, "env"), rng)
    obj = _section(cfg, "objective")
    hidden, tc = build_train_config(cfg)
    learner = _learner(obj["kind"], _get(obj, "lambda", float, 0.0, "objective"), hidden, tc)
    _, curve, params = learner.fit(S, derive_seed(master, "train"), test_set=T, env=env, record_curve=True)
    files = {"learning_curve.csv": curve.csv_text(), "train.txt": dataset_dumps(S),
             "test.txt": dataset_dumps(T), "params.txt": params_dumps(params)}
    report = {"final": {"train_obj": curve.train_obj[-1], "train_value": curve.train_value[-1],
                        "test_value": curve.test_value[-1]}, "epochs": len(curve)}
    return files, report


def _learner_kinds(cfg: dict, default):
    kinds = _section(cfg, "trainer").get("learners", list(default))
    if not isinstance(kinds, list) or any(k not in KINDS for k in kinds):
        raise ConfigError(f"[trainer] learners must be a list drawn from {KINDS}")
    return kinds


def _run_stability_tv(cfg: dict, jobs: int):
    master = cfg["seeds"]["master_seed"]
    m = _get(cfg["seeds"], "m_resamples", int, 20, "seeds")
    rng = substream(master, "tv-data")
    env = build_env(cfg, rng)
    sec = _section(cfg, "env")
    base = sample_dataset(env, _get(sec, "n_train", int, 100, "env"), rng)
    test = env.sample_contexts(_get(sec, "n_test", int, 500, "env"), rng)
    hidden, tc = build_train_config(cfg)
    lam = _get(_section(cfg, "objective"), "lambda", float, 0.0, "objective")
    shared = _get(_section(cfg, "trainer"), "shared_init", bool, True, "trainer")
    files, report = {}, {"tv": {}}
    for kind in _learner_kinds(cfg, ("ips_policy", "value_squared")):
        mat = tv_resampling_experiment(base, uniform_behavior(env.k), m, _learner(kind, lam, hidden, tc),
                                       test, master, env=env, jobs=jobs, shared_init=shared)
        files[f"tv_{kind}.csv"] = tv_matrix_csv(mat)
        report["tv"][kind] = tv_summary(mat)
    report["tv_matrices"] = sorted(files)
    return files, report


def _run_decompose(cfg: dict, jobs: int):
    seeds, sec = cfg["seeds"], _section(cfg, "env")
    if sec.get("kind", "gaussian_linear") != "gaussian_linear":
        raise ConfigError("[env] decompose supports kind = 'gaussian_linear'")
    factory = GaussianLinearFactory(_get(sec, "k", int, 2, "env"), _get(sec, "d", int, 10, "env"),
                                    _get(sec, "eps", float, 0.1, "env"))
    hidden, tc = build_train_config(cfg)
    lam = _get(_section(cfg, "objective"), "lambda", float, 0.0, "objective")
    kinds = _learner_kinds(cfg, ("ips_policy", "value_squared"))
    learners = {k: _learner(k, lam, hidden, tc) for k in kinds}
    rep = regret_decomposition(
        factory, learners, _get(seeds, "j_seeds", int, 50, "seeds"), full_feedback_learner(hidden, tc),
        _get(sec, "n_train", int, 100, "env"), _get(sec, "n_test", int, 500, "env"),
        seeds["master_seed"], jobs)
    return {"per_seed.csv": rep.per_seed_csv()}, rep.to_dict()


def _run_theorem3(cfg: dict, jobs: int):
    sec = _section(cfg, "theorem3")
    n_values = sec.get("n_values", [10, 100, 1000])
    if not isinstance(n_values, list) or not all(isinstance(n, int) and n >= 1 for n in n_values):
        raise ConfigError("[theorem3] n_values must be a list of positive integers")
    table = theorem3_experiment(_get(sec, "delta_r", float, 1.0, "theorem3"), n_values,
                                _get(sec, "j_seeds", int, 400, "theorem3"), cfg["seeds"]["master_seed"])
    lines = ["n,bandit_error,bandit_se,full_regret"]
    for r in table:
        lines.append(f"{r['n']},{r['bandit_error']!r},{r['bandit_se']!r},{r['full_regret']!r}")
    return {"theorem3.csv": "\n".join(lines) + "\n"}, {"table": table}


def _run_bounds(cfg: dict, jobs: int):
    sec = _section(cfg, "bounds")
    master = cfg["seeds"]["master_seed"]
    report = {}
    rng = substream(master, "bounds-theorem1")
    env = random_discrete_env(20, 2, rng, tau=0.2)
    qhat = TabularQ(env.contexts, env.q_table + rng.normal(0, 0.2, env.q_table.shape))
    report["regret_from_mse"] = theorem1_check(qhat, env, rng=rng).to_dict()
    report["in_sample_lower_bound"] = theorem2_empirical_check(
        NnLowerBoundSpec(1.0), n_train=6, j_seeds=4, rng=substream(master, "bounds-theorem2")).to_dict()
    noisy = NoisyClassificationSpec(_get(sec, "eta", float, 0.25, "bounds"), _get(sec, "c_r", float, 1.0, "bounds"))
    report["noisy_classification"] = theorem6_identity_check(
        noisy, 200, 100, substream(master, "bounds-noisy")).to_dict()
    rng = substream(master, "bounds-dr")
    report["dr_equivalence"] = dr_equivalence_check(
        sample_dataset(NnLowerBoundSpec(1.0), 50, rng), 100, rng).to_dict()
    rng = substream(master, "bounds-coverage")
    report["finite_class_coverage"] = appendixF_coverage_test(
        random_discrete_env(20, 2, rng), constant_policy_class(2, _get(sec, "class_size", int, 8, "bounds")),
        _get(sec, "delta", float, 0.1, "bounds"), _get(sec, "n", int, 200, "bounds"),
        _get(sec, "j_resamples", int, 500, "bounds"), rng).to_dict()
    lines = ["check,bound,empirical,holds"] + [
        f"{k},{v['bound']!r},{v['empirical']!r},{v['holds']}" for k, v in report.items()]
    return {"bounds.csv": "\n".join(lines) + "\n"}, report


def _run_verify_all(cfg: dict, jobs: int):
    from .verify import run_all

    results = run_all(cfg["seeds"]["master_seed"])
    lines = ["check,passed,detail"] + [f"{r.name},{r.passed},\"{r.detail}\"" for r in results]
    report = {"checks": [r._asdict() for r in results], "all_passed": all(r.passed for r in results)}
    return {"verify.csv": "\n".join(lines) + "\n"}, report


RUNNERS = {
    "gen-data": _run_gen_data,
    "train": _run_train,
    "stability-tv": _run_stability_tv,
    "decompose": _run_decompose,
    "theorem3": _run_theorem3,
    "bounds": _run_bounds,
    "verify-all": _run_verify_all,
}


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------

def emit_plot_data(report_paths, out_dir) -> list[str]:
    """Write plot-ready CSVs derived from report files; returns the names written.

    TV reports give one m x m matrix CSV per learner (copied from the run
    directory), decomposition reports give a bar CSV (algorithm, bandit_error,
    std).  An empty list writes nothing.
    """
    out = Path(out_dir)
    written = []
    for path in report_paths:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"malformed report {path}: {exc}") from None
        report = doc.get("report", doc)
        if "tv_matrices" in report:
            for name in report["tv_matrices"]:
                src = path.parent / name
                dst = "fig1_" + name
                (out / dst).write_text(src.read_text(encoding="utf-8"), encoding="utf-8")
                written.append(dst)
        if "summary" in report and "algorithms" in report:
            lines = ["algorithm,bandit_error,std"]
            for a in report["algorithms"]:
                s = report["summary"][a]
                lines.append(f"{a},{s['bandit']!r},{s['bandit_std']!r}")
            (out / "fig2_bars.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append("fig2_bars.csv")
    return written


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _versions() -> dict:
    return {"banditlab": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _prepare_out(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputDirError(f"output directory {path} is not writable: {exc.strerror}") from None
    return out


def _write_error(out_dir: str | None, kind: str, message: str) -> None:
    doc = {"error": kind, "message": message}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    sys.stderr.write(text)
    if out_dir:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.json").write_text(text, encoding="utf-8")
        except OSError:
            pass


def run(experiment: str, config_path, seed: int | None = None, out: str | None = None, jobs: int = 1) -> int:
    """Run one experiment and write its artifacts; returns the exit status."""
    out_hint = out or os.environ.get("OUTPUT_DIR") or None
    try:
        cfg = resolve_config(load_config(config_path), experiment, seed, out)
        out_hint = cfg["output_dir"]
        out_dir = _prepare_out(cfg["output_dir"])
        files, report = RUNNERS[experiment](cfg, max(1, jobs))
    except (ConfigError, UnknownExperimentError, OutputDirError) as exc:
        _write_error(out_hint, exc.kind, str(exc))
        return exc.code
    except Exception as exc:  # any experiment failure becomes a machine-readable error
        _write_error(out_hint, "experiment_failed", f"{type(exc).__name__}: {exc}")
        return EXIT_FAILED

    files["report.json"] = json.dumps({"experiment": experiment, "report": report},
                                      indent=2, sort_keys=True, default=float) + "\n"
    for name, text in files.items():
        (out_dir / name).write_text(text, encoding="utf-8")
    for name in emit_plot_data([out_dir / "report.json"], out_dir):
        files[name] = (out_dir / name).read_text(encoding="utf-8")
    manifest = {
        "experiment": experiment,
        "config": cfg,
        "config_sha1": config_hash(cfg),
        "outputs": {name: git_blob_sha1(text.encode()) for name, text in sorted(files.items())},
        "versions": _versions(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    if experiment == "verify-all" and not report["all_passed"]:
        return EXIT_CHECKS_FAILED
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="banditlab", description=__doc__.splitlines()[0])
    parser.add_argument("experiment", help=f"one of: {', '.join(EXPERIMENTS)}")
    parser.add_argument("--config", required=True, help="TOML config or a previous manifest.json")
    parser.add_argument("--seed", type=int, default=None, help="override [seeds] master_seed")
    parser.add_argument("--out", default=None, help="output directory (overrides OUTPUT_DIR and config)")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for seeds and replicates")
    args = parser.parse_args(argv)
    return run(args.experiment, args.config, args.seed, args.out, args.jobs)


if __name__ == "__main__":
    sys.exit(main())
