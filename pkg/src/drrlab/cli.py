"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 divergence, 3 check failure.
The master seed in a config can be overridden with ``DRRLAB_SEED``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from drrlab.checks import report_json
from drrlab.data import DataError
from drrlab.experiment import (
    ConfigError,
    build_mixing,
    build_problem,
    build_schedule,
    run_experiment,
    validate_config,
)
from drrlab.graphs import GraphError
from drrlab.metrics import SolverError, reference_solve, sigma_star
from drrlab.optimizers import DivergenceError, check_admissible, stepsize_terms
from drrlab.suites import SUITES, UnknownSuiteError, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3
SEED_ENV = "DRRLAB_SEED"

log = logging.getLogger("drrlab")


def _seed_override() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV}: expected an integer, got {raw!r}") from exc


def _load(path):
    cfg = validate_config(path, seed_override=_seed_override())
    for msg in cfg.warnings:
        log.warning(msg)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args.config)
    if args.output:
        cfg.output = args.output
    if args.workers:
        cfg.workers = args.workers
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = run_experiment(cfg)
    for w in caught:
        if str(w.message) not in cfg.warnings:
            log.warning(str(w.message))
    for method, rec in result.records.items():
        finals = ", ".join(f"{k}={rec.final(k):.4e}" for k in rec.samples)
        print(f"{method}: {finals}")
    for path in result.files:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_suite(args) -> int:
    verdicts = run_suite(args.name)
    text = report_json(verdicts)
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)
    return EXIT_OK if all(v.passed for v in verdicts) else EXIT_CHECK


def cmd_solve(args) -> int:
    cfg = _load(args.config)
    prob = build_problem(cfg)
    ref = reference_solve(prob)
    out = ref.as_dict()
    out["sigma_star"] = sigma_star(prob, ref.x_star)
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_graph_info(args) -> int:
    cfg = _load(args.config)
    w = build_mixing(cfg)
    prob = build_problem(cfg)
    info = {
        "graph": w.graph.name if w.graph is not None else cfg.graph["kind"],
        "n": w.n,
        "edges": len(w.graph.edges) if w.graph is not None else None,
        "rho_w": w.rho_w,
        "L": prob.L,
        "mu": prob.mu,
    }
    if prob.mu > 0:
        info["stepsize_limits"] = {k: (v if v != float("inf") else "inf") for k, v in stepsize_terms(w.rho_w, prob.L, prob.mu).items()}
        sched = build_schedule(cfg, prob, w.rho_w)
        info["schedule"] = check_admissible(sched, w.rho_w, prob.L, prob.mu, prob.m).as_dict()
        info["schedule"]["terms"] = {k: (v if v != float("inf") else "inf") for k, v in info["schedule"]["terms"].items()}
    print(json.dumps(info, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drrlab", description="Distributed random reshuffling experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--output", help="override the output prefix")
    p.add_argument("--workers", type=int, help="threads for repetition fan-out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help=f"run a check suite ({', '.join(SUITES)})")
    p.add_argument("name")
    p.add_argument("--output", help="write the JSON report here as well")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("solve", help="reference solution only")
    p.add_argument("config")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("graph-info", help="print n, rho_w and stepsize thresholds")
    p.add_argument("config")
    p.set_defaults(func=cmd_graph_info)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, GraphError, DataError, UnknownSuiteError) as exc:
        log.error(str(exc))
        return EXIT_CONFIG
    except DivergenceError as exc:
        log.error(str(exc))
        return EXIT_DIVERGED
    except SolverError as exc:
        log.error(str(exc))
        return EXIT_CHECK
    except OSError as exc:
        log.error(f"I/O failure: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
