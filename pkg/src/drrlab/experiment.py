"""Config-driven experiment runner.

A config is a YAML mapping with four sections plus a few top-level scalars::

    problem:   {kind: quadratic, m: 8, p: 10, mu: 1.0, L: 4.0}
    graph:     {kind: ring, n: 8}
    optimizer: {methods: [drr, dsgd], schedule: {kind: constant, alpha: 0.01}, epochs: 500}
    repetitions: 10
    seed: 0
    output: results/ring8

Unknown keys are rejected. ``run_experiment`` writes one CSV per method
(``<output>_<method>.csv``) holding ``epoch,metric,mean,stderr,rep0,...``
rows and a JSON sidecar (``<output>.json``) with the resolved config and the
problem constants.
"""

from __future__ import annotations

import copy
import io
import json
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from drrlab.data import heterogeneous_partition, load_csv, synth_classification
from drrlab.graphs import Graph, GraphError, MixingMatrix, build_graph, metropolis_weights
from drrlab.metrics import (
    ReferenceSolution,
    consensus_sq,
    lyapunov_H,
    lyapunov_Q,
    lyapunov_weight,
    reference_solve,
    sigma_star,
)
from drrlab.objectives import PROBLEM_KINDS, FiniteSumProblem, make_logistic, make_quadratic
from drrlab.optimizers import (
    METHODS,
    ConstantStep,
    DivergenceError,
    HyperbolicStep,
    InverseTimeStep,
    check_admissible,
    iterate,
    min_K,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "TrajectoryRecord",
    "ExperimentResult",
    "METRICS",
    "validate_config",
    "parse_config",
    "build_problem",
    "build_mixing",
    "build_schedule",
    "initial_block",
    "rep_seeds",
    "run_experiment",
    "write_csv",
]

METRICS = ("dist_sq", "consensus_sq", "grad_norm_sq", "f_gap", "lyapunov_H", "lyapunov_Q")

_INIT_TAG = 0x1A17
_REP_TAG = 0x0BE7


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


# ---------------------------------------------------------------------------
# schema

_SCHEMA = {
    "problem": {
        "kind": (str, None),
        "m": (int, None),
        "p": (int, 10),
        "mu": (float, 1.0),
        "L": (float, 4.0),
        "heterogeneity": (float, 1.0),
        "spread": (float, 1.0),
        "seed": (int, 0),
        "rho": (float, 0.2),
        "eta": (float, 0.2),
        "data": (str, None),
        "samples": (int, None),
        "separation": (float, 1.0),
    },
    "graph": {
        "kind": (str, None),
        "n": (int, None),
        "rows": (int, None),
        "cols": (int, None),
        "prob": (float, 0.8),
        "seed": (int, 0),
        "path": (str, None),
    },
    "optimizer": {
        "methods": (list, None),
        "schedule": (dict, None),
        "epochs": (int, None),
    },
    "init": {
        "mode": (str, "shared"),
        "scale": (float, 1.0),
    },
    "repetitions": (int, 10),
    "seed": (int, 0),
    "output": (str, None),
    "metrics": (list, ["dist_sq", "consensus_sq", "grad_norm_sq", "f_gap"]),
    "workers": (int, 1),
}

_SCHEDULES = {
    "constant": {"alpha": float},
    "inverse_time": {"theta": float, "K": (float, str)},
    "hyperbolic": {"a": float, "b": float},
}

_REQUIRED = {"problem.kind", "problem.m", "graph.kind", "graph.n", "optimizer.methods", "optimizer.schedule", "optimizer.epochs"}
_POSITIVE = {
    "problem.m", "problem.p", "problem.mu", "problem.L", "problem.samples", "problem.rho",
    "graph.n", "graph.rows", "graph.cols", "optimizer.epochs", "repetitions", "workers",
}


def _coerce(value, typ, path):
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if not isinstance(value, typ):
        raise ConfigError(f"{path}: expected {typ.__name__}, got {value!r}")
    return value


def _resolve(tree: dict, schema: dict, prefix: str = "") -> dict:
    if not isinstance(tree, dict):
        raise ConfigError(f"{prefix or '<root>'}: expected a mapping, got {tree!r}")
    unknown = sorted(set(tree) - set(schema))
    if unknown:
        where = prefix or "<root>"
        raise ConfigError(f"{where}: unknown key(s) {', '.join(prefix + '.' + k if prefix else k for k in unknown)}")
    out = {}
    for key, spec in schema.items():
        path = f"{prefix}.{key}" if prefix else key
        if isinstance(spec, dict):
            out[key] = _resolve(tree.get(key, {}) or {}, spec, path)
            continue
        typ, default = spec
        if key not in tree or tree[key] is None:
            if path in _REQUIRED:
                raise ConfigError(f"{path}: required key missing")
            out[key] = copy.deepcopy(default)
            continue
        val = _coerce(tree[key], typ, path)
        if path in _POSITIVE and val is not None and val <= 0:
            raise ConfigError(f"{path}: must be positive, got {val!r}")
        out[key] = val
    return out


def _resolve_schedule(sched: dict) -> dict:
    kind = sched.get("kind")
    if kind not in _SCHEDULES:
        raise ConfigError(f"optimizer.schedule.kind: expected one of {', '.join(_SCHEDULES)}, got {kind!r}")
    fields = _SCHEDULES[kind]
    unknown = sorted(set(sched) - set(fields) - {"kind"})
    if unknown:
        raise ConfigError(f"optimizer.schedule: unknown key(s) {', '.join('optimizer.schedule.' + k for k in unknown)}")
    out = {"kind": kind}
    for key, typ in fields.items():
        path = f"optimizer.schedule.{key}"
        if key not in sched:
            if kind == "inverse_time" and key == "K":
                out[key] = "auto"
                continue
            raise ConfigError(f"{path}: required key missing")
        val = sched[key]
        if key == "K" and isinstance(val, str):
            if val != "auto":
                raise ConfigError(f"{path}: expected a number or 'auto', got {val!r}")
            out[key] = val
            continue
        val = _coerce(val, float, path)
        if val <= 0 and not (kind == "hyperbolic" and key == "a" and val == 0):
            raise ConfigError(f"{path}: must be positive, got {val!r}")
        out[key] = val
    return out


@dataclass
class ExperimentConfig:
    problem: dict
    graph: dict
    optimizer: dict
    init: dict
    repetitions: int
    seed: int
    output: str | None
    metrics: list[str]
    workers: int
    base_dir: Path = field(default_factory=Path.cwd)
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "problem": dict(self.problem),
            "graph": dict(self.graph),
            "optimizer": copy.deepcopy(self.optimizer),
            "init": dict(self.init),
            "repetitions": self.repetitions,
            "seed": self.seed,
            "output": self.output,
            "metrics": list(self.metrics),
            "workers": self.workers,
        }


def parse_config(tree: dict, *, base_dir: str | Path | None = None, seed_override: int | None = None) -> ExperimentConfig:
    """Validate a config mapping and fill defaults. Admissibility issues become warnings."""
    if tree is None:
        tree = {}
    res = _resolve(tree, _SCHEMA)
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    prob, graph, opt = res["problem"], res["graph"], res["optimizer"]

    if prob["kind"] not in PROBLEM_KINDS:
        raise ConfigError(f"problem.kind: expected one of {', '.join(PROBLEM_KINDS)}, got {prob['kind']!r}")
    if prob["kind"] == "quadratic" and prob["mu"] > prob["L"]:
        raise ConfigError(f"problem.mu: {prob['mu']} exceeds problem.L = {prob['L']}")
    if prob["data"] is not None:
        path = Path(prob["data"])
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ConfigError(f"problem.data: file {path} does not exist")
        prob["data"] = str(path)

    if graph["path"] is not None:
        path = Path(graph["path"])
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ConfigError(f"graph.path: file {path} does not exist")
        graph["path"] = str(path)
    elif graph["kind"] == "grid":
        n, r, c = graph["n"], graph["rows"], graph["cols"]
        side = int(round(math.sqrt(n)))
        if r is None and c is None and side * side != n:
            raise ConfigError(f"graph.rows/graph.cols: grid with n={n} (not a perfect square) needs an explicit factorization rows*cols = n")
        if r is not None and c is not None and r * c != n:
            raise ConfigError(f"graph.rows/graph.cols: {r}x{c} does not factor n={n}")
        if (r is None) != (c is None):
            given = r if r is not None else c
            if n % given:
                raise ConfigError(f"graph.rows/graph.cols: {given} does not divide n={n}")

    methods = opt["methods"]
    if not methods:
        raise ConfigError("optimizer.methods: at least one method required")
    for k, meth in enumerate(methods):
        if meth not in METHODS:
            raise ConfigError(f"optimizer.methods[{k}]: expected one of {', '.join(METHODS)}, got {meth!r}")
    if len(set(methods)) != len(methods):
        raise ConfigError("optimizer.methods: duplicate entries")
    opt["schedule"] = _resolve_schedule(opt["schedule"])

    for k, met in enumerate(res["metrics"]):
        if met not in METRICS:
            raise ConfigError(f"metrics[{k}]: expected one of {', '.join(METRICS)}, got {met!r}")
    if res["init"]["mode"] not in ("shared", "distinct"):
        raise ConfigError(f"init.mode: expected 'shared' or 'distinct', got {res['init']['mode']!r}")

    seed = res["seed"] if seed_override is None else int(seed_override)
    cfg = ExperimentConfig(
        problem=prob,
        graph=graph,
        optimizer=opt,
        init=res["init"],
        repetitions=res["repetitions"],
        seed=seed,
        output=res["output"],
        metrics=list(res["metrics"]),
        workers=res["workers"],
        base_dir=base,
    )
    sched = opt["schedule"]
    if sched["kind"] == "inverse_time" and sched["theta"] <= 12:
        cfg.warnings.append(f"theta = {sched['theta']:g}: theta > 12 required for the O(1/(t+K)^2) guarantee")
    return cfg


def validate_config(path: str | Path, *, seed_override: int | None = None) -> ExperimentConfig:
    """Load and validate a YAML config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    cfg = parse_config(tree, base_dir=path.parent, seed_override=seed_override)
    if cfg.output is not None and not Path(cfg.output).is_absolute():
        cfg.output = os.path.normpath(path.parent / cfg.output)
    return cfg


# ---------------------------------------------------------------------------
# builders


def build_problem(cfg: ExperimentConfig) -> FiniteSumProblem:
    pc = cfg.problem
    n, m = cfg.graph["n"], pc["m"]
    if pc["kind"] == "quadratic":
        return make_quadratic(
            n, m, pc["p"], mu=pc["mu"], L=pc["L"], heterogeneity=pc["heterogeneity"], spread=pc["spread"], seed=pc["seed"]
        )
    if pc["data"] is not None:
        ds = load_csv(pc["data"])
    else:
        samples = pc["samples"] if pc["samples"] is not None else 4 * n * m
        ds = synth_classification(samples, pc["p"], pc["separation"], pc["seed"])
    part = heterogeneous_partition(ds, n, m)
    reg = "l2" if pc["kind"] == "logistic_l2" else "sigmoidal"
    return make_logistic(ds, part, reg=reg, rho=pc["rho"], eta=pc["eta"])


def build_mixing(cfg: ExperimentConfig) -> MixingMatrix:
    gc = cfg.graph
    if gc["path"] is not None:
        g = Graph.load(gc["path"])
        if g.n != gc["n"]:
            raise ConfigError(f"graph.path: edge list has {g.n} nodes but graph.n = {gc['n']}")
    else:
        try:
            g = build_graph(gc["kind"], gc["n"], rows=gc["rows"], cols=gc["cols"], prob=gc["prob"], seed=gc["seed"])
        except GraphError as exc:
            raise ConfigError(f"graph: {exc}") from exc
    try:
        return metropolis_weights(g)
    except GraphError as exc:
        raise ConfigError(f"graph: {exc}") from exc


def build_schedule(cfg: ExperimentConfig, prob: FiniteSumProblem, rho_w: float):
    sc = cfg.optimizer["schedule"]
    if sc["kind"] == "constant":
        return ConstantStep(sc["alpha"])
    if sc["kind"] == "hyperbolic":
        return HyperbolicStep(sc["a"], sc["b"])
    if prob.mu <= 0:
        raise ConfigError("optimizer.schedule.kind: inverse_time schedule needs a strongly convex problem")
    K = sc["K"]
    if K == "auto":
        K = float(math.ceil(min_K(sc["theta"], rho_w, prob.L, prob.mu, prob.m)))
    return InverseTimeStep(sc["theta"], K, prob.m, prob.mu)


def initial_block(cfg: ExperimentConfig, n: int, p: int) -> np.ndarray:
    """Initial iterates drawn once from the master seed and shared by every method."""
    rng = np.random.default_rng([cfg.seed, _INIT_TAG])
    scale = cfg.init["scale"]
    if cfg.init["mode"] == "shared":
        return np.tile(scale * rng.standard_normal(p), (n, 1))
    return scale * rng.standard_normal((n, p))


def rep_seeds(master: int, reps: int) -> list[int]:
    return [int(np.random.SeedSequence([master, _REP_TAG, r]).generate_state(1)[0]) for r in range(reps)]


# ---------------------------------------------------------------------------
# records


@dataclass
class TrajectoryRecord:
    method: str
    epochs: np.ndarray
    samples: dict[str, np.ndarray]  # metric -> (R, T+1)

    @property
    def repetitions(self) -> int:
        return next(iter(self.samples.values())).shape[0]

    def mean(self, metric: str) -> np.ndarray:
        return self.samples[metric].mean(axis=0)

    def stderr(self, metric: str) -> np.ndarray:
        s = self.samples[metric]
        if s.shape[0] < 2:
            return np.zeros(s.shape[1])
        return s.std(axis=0, ddof=1) / math.sqrt(s.shape[0])

    def final(self, metric: str) -> float:
        return float(self.mean(metric)[-1])


@dataclass
class ExperimentResult:
    records: dict[str, TrajectoryRecord]
    sidecar: dict
    files: list[Path] = field(default_factory=list)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(record: TrajectoryRecord, path: str | Path | None = None) -> str:
    """Serialise a record; returns the text and writes it when ``path`` is given."""
    buf = io.StringIO()
    R = record.repetitions
    buf.write(",".join(["epoch", "metric", "mean", "stderr"] + [f"rep{r}" for r in range(R)]) + "\n")
    means = {k: record.mean(k) for k in record.samples}
    ses = {k: record.stderr(k) for k in record.samples}
    for t_idx, t in enumerate(record.epochs):
        for metric, arr in record.samples.items():
            row = [str(int(t)), metric, _fmt(means[metric][t_idx]), _fmt(ses[metric][t_idx])]
            row += [_fmt(v) for v in arr[:, t_idx]]
            buf.write(",".join(row) + "\n")
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------------------
# running


def _one_run(method, prob, w, x0, schedule, epochs, seed, metrics, ref: ReferenceSolution, f_bar):
    out = {k: np.empty(epochs + 1) for k in metrics}
    x_star, f_star = ref.x_star, ref.f_star
    need_grad = "grad_norm_sq" in metrics
    need_f = "f_gap" in metrics
    for state in iterate(method, prob, w, x0, schedule, epochs, seed):
        t = state.epoch
        x = state.x
        xbar = x.mean(axis=0)
        if "dist_sq" in out:
            out["dist_sq"][t] = float(np.mean(np.sum((x - x_star) ** 2, axis=1)))
        if "consensus_sq" in out:
            out["consensus_sq"][t] = consensus_sq(x)
        if need_grad:
            g = prob.full_gradient(xbar)
            out["grad_norm_sq"][t] = float(g @ g)
        if need_f:
            out["f_gap"][t] = prob.value(xbar) - f_star
        if "lyapunov_H" in out:
            omega = lyapunov_weight(schedule(t), prob.L, prob.mu, prob.n, w.rho_w)
            out["lyapunov_H"][t] = lyapunov_H(x, x_star, omega)
        if "lyapunov_Q" in out:
            out["lyapunov_Q"][t] = lyapunov_Q(prob, x, schedule(t), f_bar, w.rho_w)
    return out


def run_method(
    method: str,
    prob: FiniteSumProblem,
    w: MixingMatrix,
    x0: np.ndarray,
    schedule,
    epochs: int,
    seeds: list[int],
    metrics,
    ref: ReferenceSolution,
    *,
    workers: int = 1,
    f_bar: float | None = None,
) -> TrajectoryRecord:
    """Run one method over all repetition seeds (optionally on a thread pool)."""
    metrics = list(metrics)
    if ("lyapunov_H" in metrics) and prob.mu <= 0:
        raise ConfigError("metrics: lyapunov_H needs a strongly convex problem")
    f_bar = ref.f_star if f_bar is None else f_bar

    def job(seed):
        return _one_run(method, prob, w, x0, schedule, epochs, seed, metrics, ref, f_bar)

    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(job, seeds))
    else:
        runs = [job(s) for s in seeds]
    samples = {k: np.stack([r[k] for r in runs]) for k in metrics}
    return TrajectoryRecord(method, np.arange(epochs + 1), samples)


def run_experiment(cfg: ExperimentConfig, *, write: bool = True) -> ExperimentResult:
    """Execute every configured method for ``cfg.repetitions`` seeded runs.

    Raises :class:`DivergenceError` (carrying method and epoch) if any run blows up.
    """
    t0 = time.perf_counter()
    prob = build_problem(cfg)
    w = build_mixing(cfg)
    schedule = build_schedule(cfg, prob, w.rho_w)
    report = check_admissible(schedule, w.rho_w, prob.L, prob.mu, prob.m) if prob.mu > 0 else None
    notes = list(cfg.warnings)
    if report is not None:
        notes += report.warnings
    for msg in notes:
        warnings.warn(msg, stacklevel=2)
    ref = reference_solve(prob)
    x0 = initial_block(cfg, prob.n, prob.p)
    seeds = rep_seeds(cfg.seed, cfg.repetitions)
    records = {}
    for method in cfg.optimizer["methods"]:
        records[method] = run_method(
            method, prob, w, x0, schedule, cfg.optimizer["epochs"], seeds, cfg.metrics, ref, workers=cfg.workers
        )
    sidecar = {
        "config": cfg.as_dict(),
        "rho_w": w.rho_w,
        "mu": prob.mu,
        "L": prob.L,
        "sigma_star": sigma_star(prob, ref.x_star),
        "reference": ref.as_dict(),
        "schedule": {"kind": schedule.kind, "peak": schedule.peak, **({"K": schedule.K} if hasattr(schedule, "K") else {})},
        "admissibility": report.as_dict() if report is not None else None,
        "warnings": notes,
        "repetition_seeds": seeds,
        "wall_time_s": time.perf_counter() - t0,
    }
    files: list[Path] = []
    if write and cfg.output is not None:
        out = Path(cfg.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        for method, rec in records.items():
            path = out.parent / f"{out.name}_{method}.csv"
            write_csv(rec, path)
            files.append(path)
        side = out.parent / f"{out.name}.json"
        side.write_text(json.dumps(sidecar, indent=2, default=_json_default))
        files.append(side)
    return ExperimentResult(records, sidecar, files)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not serialisable: {type(obj).__name__}")


__all__ += ["DivergenceError", "run_method"]
