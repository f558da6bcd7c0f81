"""Batch experiment runner: configs, presets, metrics, CSV artifacts.

A run is fully determined by (resolved config, seed, profile); repeated runs
produce bit-identical output files.  Timing is reported on stderr only so it
never pollutes the deterministic artifacts.

Config files are INI-style text with three sections::

    [experiment]          problem, strategy, seeds, out
    [train]               samples, epochs, n_boundary, learning_rate,
                          lambda_boundary, iterations, hidden_layers,
                          hidden_width, rar_factor, sais_p0, sais_rounds,
                          sais_n, init_time_cap
    [attack]              epsilon, eta, steps, revisit, attack_boundary_seeds

Presets named ``<problem>-<strategy>`` (e.g. ``poisson-at-pinn``) carry the
benchmark settings; ``--profile desk`` divides every epoch count by 10 for
desk-scale work and is recorded in the run manifest.
"""

from __future__ import annotations

import configparser
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, network, oracle, pde, sampling, training

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "PRESETS",
    "preset_config",
    "load_config",
    "resolve_config",
    "apply_profile",
    "evaluate_metrics",
    "make_evaluator",
    "run_experiment",
    "run_from_config",
    "sweep",
    "METRICS_COLUMNS",
    "write_metrics_csv",
    "read_metrics_csv",
]

PROFILES = ("full", "desk")

METRICS_COLUMNS = (
    "k",
    "n_samples",
    "error",
    "max_residual_grid",
    "max_residual_new_samples",
)

GRID_PER_DIM = 256


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    """A strategy-vs-benchmark experiment over a list of seeds."""

    problem: str
    strategy: str
    seeds: list[int]
    out: str
    samples: list[int]
    epochs: list[int]
    n_boundary: int
    iterations: int
    learning_rate: float = 1e-4
    lambda_boundary: float = 1.0
    hidden_layers: int = 8
    hidden_width: int = 20
    rar_factor: float = 2.0
    sais_p0: float = 0.1
    sais_rounds: int = 10
    sais_n: int | None = None
    init_time_cap: float | None = None
    epsilon: float | None = None
    eta: float | None = None
    steps: int | None = None
    revisit: float | None = None
    attack_boundary_seeds: bool = False

    def validate(self):
        if self.problem not in pde.PROBLEM_NAMES:
            raise ConfigError(f"unknown problem {self.problem!r}")
        if self.strategy not in training.STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if self.strategy == "at_pinn" and None in (
            self.epsilon, self.eta, self.steps, self.revisit
        ):
            raise ConfigError("at_pinn strategy needs the [attack] section")
        return self


# ---------------------------------------------------------------------------
# presets (benchmark experiment setups)


def _poisson_base():
    return dict(
        problem="poisson2d",
        n_boundary=200,
        samples=[500, 500] + [1000] * 7,
        epochs=[200_000] + [50_000] * 8,
        iterations=8,
        lambda_boundary=1.0,
        sais_n=300,
    )


def _burgers_base():
    return dict(
        problem="burgers",
        n_boundary=100,
        samples=[500, 500, 1000],
        epochs=[100_000, 200_000, 100_000],
        iterations=2,
        lambda_boundary=1.0,
        sais_n=300,
        attack_boundary_seeds=True,
    )


def _multiscale_base():
    return dict(
        problem="multiscale",
        n_boundary=2,
        samples=[200] * 30,
        epochs=[30_000] * 30,
        iterations=29,
        lambda_boundary=200.0,
    )


def _allen_cahn_base():
    return dict(
        problem="allen_cahn",
        n_boundary=400,
        samples=[500] * 9,
        epochs=[1_000_000] * 9,
        iterations=8,
        lambda_boundary=1.0,
        init_time_cap=0.2,
        attack_boundary_seeds=True,
        sais_n=300,
    )


_ATTACKS = {
    "poisson2d": dict(epsilon=0.1, eta=0.02, steps=20, revisit=1.0),
    "burgers": dict(epsilon=0.1, eta=0.02, steps=20, revisit=1.0),
    "multiscale": dict(epsilon=0.2, eta=0.02, steps=2, revisit=2.0),
    "allen_cahn": dict(epsilon=0.2, eta=0.02, steps=20, revisit=1.5),
}

_PRESET_PROBLEM_KEY = {
    "poisson2d": "poisson",
    "burgers": "burgers",
    "multiscale": "multiscale",
    "allen_cahn": "allen-cahn",
}

_PRESET_STRATEGY_KEY = {
    "at_pinn": "at-pinn",
    "uniform": "uniform",
    "rar": "rar",
    "sais": "sais",
    "lhs_baseline": "lhs",
}


def _build_presets():
    bases = {
        "poisson2d": _poisson_base,
        "burgers": _burgers_base,
        "multiscale": _multiscale_base,
        "allen_cahn": _allen_cahn_base,
    }
    presets = {}
    for prob, base_fn in bases.items():
        for strategy, skey in _PRESET_STRATEGY_KEY.items():
            base = base_fn()
            name = f"{_PRESET_PROBLEM_KEY[prob]}-{skey}"
            kw = dict(base)
            kw["strategy"] = strategy
            if strategy == "at_pinn":
                kw.update(_ATTACKS[prob])
            else:
                kw["attack_boundary_seeds"] = False
            if strategy == "lhs_baseline":
                kw["samples"] = [sum(base["samples"])]
                kw["epochs"] = [50_000]
                kw["iterations"] = 0
                kw.pop("init_time_cap", None)
            presets[name] = kw
    # tiny presets for smoke/determinism checks
    presets["smoke-uniform"] = dict(
        problem="multiscale", strategy="uniform", n_boundary=2,
        samples=[40, 20, 20], epochs=[60, 40, 40], iterations=2,
        lambda_boundary=200.0,
    )
    presets["smoke-at-pinn"] = dict(
        problem="multiscale", strategy="at_pinn", n_boundary=2,
        samples=[40, 20, 20], epochs=[60, 40, 40], iterations=2,
        lambda_boundary=200.0, epsilon=0.2, eta=0.02, steps=2, revisit=1.0,
    )
    return presets


PRESETS = _build_presets()


def preset_config(name, seeds=(0,), out="runs") -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}"
        )
    kw = dict(PRESETS[name])
    return ExperimentConfig(
        seeds=list(seeds), out=str(Path(out) / name), **kw
    ).validate()


# ---------------------------------------------------------------------------
# config file parsing


_TRAIN_KEYS = {
    "samples": "int_list",
    "epochs": "int_list",
    "n_boundary": "int",
    "iterations": "int",
    "learning_rate": "float",
    "lambda_boundary": "float",
    "hidden_layers": "int",
    "hidden_width": "int",
    "rar_factor": "float",
    "sais_p0": "float",
    "sais_rounds": "int",
    "sais_n": "int",
    "init_time_cap": "float",
}

_ATTACK_KEYS = {
    "epsilon": "float",
    "eta": "float",
    "steps": "int",
    "revisit": "float",
    "attack_boundary_seeds": "bool",
}


def _parse_value(raw, kind, key):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            return [int(v) for v in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise AssertionError(kind)


def load_config(path) -> ExperimentConfig:
    """Parse an experiment config file; raises ConfigError with diagnostics."""
    parser = configparser.ConfigParser()
    try:
        read = parser.read(path)
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from None
    if not read:
        raise ConfigError(f"config file not found: {path}")
    if "experiment" not in parser:
        raise ConfigError(f"{path}: missing [experiment] section")
    exp = parser["experiment"]
    kw = {}
    for key in exp:
        if key == "problem":
            kw["problem"] = exp[key].strip()
        elif key == "strategy":
            kw["strategy"] = exp[key].strip()
        elif key == "seeds":
            kw["seeds"] = _parse_value(exp[key], "int_list", "seeds")
        elif key == "out":
            kw["out"] = exp[key].strip()
        else:
            raise ConfigError(f"{path}: unknown key [experiment] {key}")
    for section, schema in (("train", _TRAIN_KEYS), ("attack", _ATTACK_KEYS)):
        if section not in parser:
            continue
        for key in parser[section]:
            if key not in schema:
                raise ConfigError(f"{path}: unknown key [{section}] {key}")
            kw[key] = _parse_value(parser[section][key], schema[key], key)
    missing = {"problem", "strategy", "seeds", "samples", "epochs",
               "n_boundary", "iterations"} - set(kw)
    if missing:
        raise ConfigError(f"{path}: missing keys: {', '.join(sorted(missing))}")
    kw.setdefault("out", "runs/custom")
    try:
        return ExperimentConfig(**kw).validate()
    except TypeError as err:
        raise ConfigError(f"{path}: {err}") from None


def resolve_config(name_or_path, seeds=None, out=None) -> ExperimentConfig:
    """A preset name or a config file path, with optional overrides."""
    p = Path(name_or_path)
    if p.exists():
        cfg = load_config(p)
    elif name_or_path in PRESETS:
        cfg = preset_config(name_or_path)
    else:
        raise ConfigError(
            f"{name_or_path!r} is neither a config file nor a preset"
        )
    if seeds is not None:
        cfg = replace(cfg, seeds=list(seeds))
    if out is not None:
        cfg = replace(cfg, out=out)
    return cfg.validate()


def apply_profile(cfg: ExperimentConfig, profile: str) -> ExperimentConfig:
    """Desk profile divides all epoch counts by 10 (floor, at least 1)."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    if profile == "full":
        return cfg
    epochs = [max(1, e // 10) for e in cfg.epochs]
    return replace(cfg, epochs=epochs)


# ---------------------------------------------------------------------------
# metrics


def _reference_values(problem, cache_dir=None):
    """Reference solution on the evaluation grid, or None for residual MSE."""
    points, axes = pde.grid_points(problem.domain, GRID_PER_DIM)
    exact = problem.exact_solution(points)
    if exact is not None:
        return points, exact
    if problem.name == "burgers":
        grid = oracle.burgers_reference_grid(GRID_PER_DIM, cache_dir=cache_dir)
        return points, grid.values.ravel()
    if problem.name == "allen_cahn":
        grid = oracle.allen_cahn_reference(GRID_PER_DIM, cache_dir=cache_dir)
        return points, grid.values.ravel()
    if problem.metric_kind == "residual_mse":
        return points, None
    raise ConfigError(f"no reference available for problem {problem.name!r}")


def make_evaluator(problem, cache_dir=None):
    """Metric callback: (error, max grid |residual|) on the 256^d test grid."""
    points, ref = _reference_values(problem, cache_dir)

    def evaluator(problem_, params):
        res = pde.residual_values(problem_, params, points)
        max_res = float(np.max(np.abs(res)))
        if problem_.metric_kind == "residual_mse":
            err = float(np.mean(res**2))
        else:
            pred = network.forward(params, points)
            err = float(
                np.linalg.norm(pred - ref) / np.linalg.norm(ref)
            )
        return err, max_res

    return evaluator


def evaluate_metrics(problem, params, cache_dir=None):
    """One-off metric row for a parameter set (see make_evaluator)."""
    return make_evaluator(problem, cache_dir)(problem, params)


# ---------------------------------------------------------------------------
# run artifacts


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return np.format_float_scientific(x, precision=16) if np.isfinite(x) else "nan"


def write_metrics_csv(path, metrics: training.Metrics) -> None:
    lines = [",".join(METRICS_COLUMNS)]
    for row in metrics.rows:
        lines.append(
            ",".join(
                [
                    str(row.k),
                    str(row.n_samples),
                    _fmt(row.error),
                    _fmt(row.max_grid_residual),
                    _fmt(row.max_new_sample_residual),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_csv(path):
    """Rows as dicts with numeric values; inverse of write_metrics_csv."""
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    if tuple(header) != METRICS_COLUMNS:
        raise ValueError(f"unexpected metrics columns in {path}")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        rows.append(
            {
                "k": int(vals[0]),
                "n_samples": int(vals[1]),
                "error": float(vals[2]),
                "max_residual_grid": float(vals[3]),
                "max_residual_new_samples": float(vals[4]),
            }
        )
    return rows


def _write_samples_csv(path, sample_set: sampling.SampleSet) -> None:
    dim = sample_set.points.shape[1]
    cols = [f"x{i}" for i in range(dim)] + ["iteration_tag", "origin"]
    lines = [",".join(cols)]
    for pt, tag in zip(sample_set.points, sample_set.iteration_tags):
        coords = [_fmt(c) for c in pt]
        lines.append(",".join(coords + [str(int(tag)), sample_set.origin]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_samples_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    dim = len(header) - 2
    pts, tags, origins = [], [], []
    for line in lines[1:]:
        vals = line.split(",")
        pts.append([float(v) for v in vals[:dim]])
        tags.append(int(vals[dim]))
        origins.append(vals[dim + 1])
    return np.array(pts), np.array(tags), origins


def _write_prediction_grid(path, problem, params) -> None:
    points, _ = pde.grid_points(problem.domain, GRID_PER_DIM)
    pred = network.forward(params, points)
    dim = points.shape[1]
    cols = [f"x{i}" for i in range(dim)] + ["u_pred"]
    lines = [",".join(cols)]
    for pt, u in zip(points, pred):
        lines.append(",".join([_fmt(c) for c in pt] + [_fmt(u)]))
    Path(path).write_text("\n".join(lines) + "\n")


def _train_config(cfg: ExperimentConfig, problem, seed) -> training.TrainConfig:
    attack = None
    if cfg.strategy == "at_pinn":
        attack = sampling.AttackConfig(
            epsilon=cfg.epsilon, eta=cfg.eta, steps=cfg.steps,
            revisit=cfg.revisit,
        )
    layer_sizes = (
        problem.input_dim,
        *([cfg.hidden_width] * cfg.hidden_layers),
        1,
    )
    return training.TrainConfig(
        strategy=cfg.strategy,
        layer_sizes=layer_sizes,
        samples_per_iteration=list(cfg.samples),
        epochs_per_iteration=list(cfg.epochs),
        n_boundary=cfg.n_boundary,
        iterations=cfg.iterations,
        learning_rate=cfg.learning_rate,
        lambda_boundary=cfg.lambda_boundary,
        seed=seed,
        attack=attack,
        rar_factor=cfg.rar_factor,
        sais_p0=cfg.sais_p0,
        sais_rounds=cfg.sais_rounds,
        sais_n=cfg.sais_n,
        init_time_cap=cfg.init_time_cap,
        attack_boundary_seeds=cfg.attack_boundary_seeds,
    )


def _manifest_dict(cfg, profile, seed, tc):
    return {
        "advpinn_version": __version__,
        "problem": cfg.problem,
        "strategy": cfg.strategy,
        "seed": seed,
        "profile": profile,
        "layer_sizes": list(tc.layer_sizes),
        "samples_per_iteration": list(tc.samples_per_iteration),
        "epochs_per_iteration": list(tc.epochs_per_iteration),
        "n_boundary": tc.n_boundary,
        "iterations": tc.iterations,
        "learning_rate": tc.learning_rate,
        "lambda_boundary": tc.lambda_boundary,
        "rar_factor": tc.rar_factor,
        "sais_p0": tc.sais_p0,
        "sais_rounds": tc.sais_rounds,
        "sais_n": tc.sais_n,
        "init_time_cap": tc.init_time_cap,
        "attack": None
        if tc.attack is None
        else {
            "epsilon": tc.attack.epsilon,
            "eta": tc.attack.eta,
            "steps": tc.attack.steps,
            "revisit": tc.attack.revisit,
            "attack_boundary_seeds": tc.attack_boundary_seeds,
        },
        "assumptions": {
            "error_metric": "relative_l2"
            if pde.get_problem(cfg.problem).metric_kind == "relative_l2"
            else "residual_mse",
            "fractional_revisit": "full window of floor(m)+1 recent iterations,"
            " round(frac*N) uniformly chosen samples of the next older one,"
            " plus the initial set",
            "new_sample_residuals": "evaluated at generation time",
            "wall_time": "reported on stderr only, never in artifacts",
        },
        "status": "complete",
    }


def _write_manifest(path, manifest) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, profile="full", cache_dir=None,
                   log=None):
    """Run all seeds of an experiment; returns the per-seed output dirs."""
    cfg = apply_profile(cfg.validate(), profile)
    problem = pde.get_problem(cfg.problem)
    evaluator = make_evaluator(problem, cache_dir)
    out_dirs = []
    log = log or (lambda msg: print(msg, file=sys.stderr, flush=True))
    for seed in cfg.seeds:
        out_dir = Path(cfg.out) / f"seed-{seed}"
        out_dir.mkdir(parents=True, exist_ok=True)
        tc = _train_config(cfg, problem, seed)
        manifest = _manifest_dict(cfg, profile, seed, tc)
        manifest["status"] = "running"
        _write_manifest(out_dir / "manifest.json", manifest)
        t0 = time.perf_counter()

        def progress(k, row):
            log(
                f"[{cfg.problem}/{cfg.strategy} seed={seed}] k={k}"
                f" n={row.n_samples} err={row.error:.3e}"
                f" max_new={row.max_new_sample_residual:.3e}"
                f" ({row.wall_time:.1f}s)"
            )

        try:
            state, history, metrics = training.run_iterative_training(
                problem, tc, evaluator=evaluator, progress=progress
            )
        except training.TrainingDiverged as err:
            manifest["status"] = f"failed: {err}"
            _write_manifest(out_dir / "manifest.json", manifest)
            raise
        write_metrics_csv(out_dir / "metrics.csv", metrics)
        for k, sset in enumerate(history):
            _write_samples_csv(out_dir / f"samples_{k:03d}.csv", sset)
        boundary_set = sampling.SampleSet(
            state.boundary_points,
            np.zeros(len(state.boundary_points), dtype=np.int64),
            "boundary",
        )
        _write_samples_csv(out_dir / "samples_boundary.csv", boundary_set)
        _write_prediction_grid(out_dir / "prediction_grid.csv", problem,
                               state.params)
        network.save_checkpoint(state.params, out_dir / "checkpoint_final.ckpt")
        manifest["status"] = "complete"
        _write_manifest(out_dir / "manifest.json", manifest)
        log(
            f"[{cfg.problem}/{cfg.strategy} seed={seed}] done in"
            f" {time.perf_counter() - t0:.1f}s -> {out_dir}"
        )
        out_dirs.append(out_dir)
    return out_dirs


def run_from_config(name_or_path, profile="full", seeds=None, out=None,
                    cache_dir=None, log=None):
    cfg = resolve_config(name_or_path, seeds=seeds, out=out)
    return run_experiment(cfg, profile=profile, cache_dir=cache_dir, log=log)


SWEEP_PARAMS = ("T", "m", "eta", "epsilon", "N", "epochs", "seed")


def _apply_sweep_value(cfg: ExperimentConfig, param, value) -> ExperimentConfig:
    if param == "T":
        return replace(cfg, steps=int(value))
    if param == "m":
        return replace(cfg, revisit=float(value))
    if param == "eta":
        return replace(cfg, eta=float(value))
    if param == "epsilon":
        return replace(cfg, epsilon=float(value))
    if param == "N":
        return replace(cfg, samples=[int(value)] * len(cfg.samples))
    if param == "epochs":
        return replace(cfg, epochs=[int(value)] * len(cfg.epochs))
    if param == "seed":
        return replace(cfg, seeds=[int(value)])
    raise ConfigError(f"unknown sweep parameter {param!r}; use {SWEEP_PARAMS}")


def sweep(name_or_path, param, values, profile="full", out=None,
          cache_dir=None, log=None):
    """One run per value of a single swept parameter; merged comparison CSV."""
    base = resolve_config(name_or_path, out=out)
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; use {SWEEP_PARAMS}")
    root = Path(base.out) / f"sweep-{param}"
    merged = [",".join(("param", "value", "seed") + METRICS_COLUMNS)]
    for value in values:
        cfg = _apply_sweep_value(base, param, value)
        if param != "seed":
            cfg = replace(cfg, seeds=cfg.seeds[:1])
        cfg = replace(cfg, out=str(root / f"{param}-{value}"))
        dirs = run_experiment(cfg, profile=profile, cache_dir=cache_dir, log=log)
        for seed, d in zip(cfg.seeds, dirs):
            for row in read_metrics_csv(Path(d) / "metrics.csv"):
                merged.append(
                    ",".join(
                        [str(param), str(value), str(seed)]
                        + [
                            str(row["k"]),
                            str(row["n_samples"]),
                            _fmt(row["error"]),
                            _fmt(row["max_residual_grid"]),
                            _fmt(row["max_residual_new_samples"]),
                        ]
                    )
                )
    root.mkdir(parents=True, exist_ok=True)
    (root / "comparison.csv").write_text("\n".join(merged) + "\n")
    return root / "comparison.csv"
