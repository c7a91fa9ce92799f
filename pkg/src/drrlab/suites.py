"""Named check suites on fixed desk-scale instances.

Each suite returns a list of :class:`~drrlab.checks.Verdict`. Parameters are
keyword arguments so tests can shrink or pin them, but the defaults are the
canonical settings.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy import stats

from drrlab.checks import (
    Verdict,
    check_consensus_scaling,
    check_contraction,
    check_floor_scaling,
    check_H_recursion,
    check_variance_sandwich,
    fit_rate,
)
from drrlab.data import heterogeneous_partition, synth_classification
from drrlab.experiment import rep_seeds, run_method
from drrlab.graphs import TOPOLOGIES, build_graph, metropolis_weights
from drrlab.metrics import reference_solve, sigma_shuffle_estimate, sigma_star
from drrlab.objectives import make_logistic, make_quadratic
from drrlab.optimizers import ConstantStep, InverseTimeStep, check_admissible, min_K

__all__ = [
    "SUITES",
    "UnknownSuiteError",
    "run_suite",
    "canonical_quadratic",
    "sandwich_quadratic",
    "nonconvex_logistic",
    "shared_start",
]


class UnknownSuiteError(KeyError):
    def __str__(self):
        return f"unknown suite {self.args[0]!r}; registered suites: {', '.join(SUITES)}"


def canonical_quadratic(n: int = 8, m: int = 8, p: int = 10, seed: int = 0):
    """Isotropic heterogeneous quadratic (mu = L = 1) used by the strongly convex suites."""
    return make_quadratic(n, m, p, mu=1.0, L=1.0, heterogeneity=1.0, spread=1.0, seed=seed)


def sandwich_quadratic(n: int = 4, m: int = 4, p: int = 3, seed: int = 0):
    """Anisotropic quadratic with every component spanning exactly ``[1, 4]``."""
    return make_quadratic(n, m, p, mu=1.0, L=4.0, heterogeneity=1.0, spread=1.0, seed=seed)


def nonconvex_logistic(n: int = 8, m: int = 8, samples: int = 640, p: int = 5, eta: float = 0.2, seed: int = 0):
    ds = synth_classification(samples, p, 1.0, seed)
    return make_logistic(ds, heterogeneous_partition(ds, n, m), reg="sigmoidal", eta=eta)


def shared_start(n: int, p: int, seed: int = 7, scale: float = 1.0) -> np.ndarray:
    return np.tile(scale * np.random.default_rng(seed).standard_normal(p), (n, 1))


def _grid_dims(n):
    side = int(round(math.sqrt(n)))
    if side * side == n:
        return side, side
    for r in range(side, 0, -1):
        if n % r == 0:
            return r, n // r
    return 1, n


def suite_contraction(*, sizes=(4, 16), trials: int = 1000, seed: int = 0) -> list[Verdict]:
    out = []
    for n in sizes:
        for kind in TOPOLOGIES:
            rows, cols = _grid_dims(n) if kind == "grid" else (None, None)
            w = metropolis_weights(build_graph(kind, n, rows=rows, cols=cols, seed=seed))
            v = check_contraction(w, trials=trials, seed=seed)
            v.params["topology"] = w.graph.name
            out.append(v)
    return out


def suite_sandwich(*, alphas=(1e-2, 1e-3), n_mc: int = 2000, seed: int = 0) -> list[Verdict]:
    return check_variance_sandwich(sandwich_quadratic(), alphas, n_mc=n_mc, seed=seed)


def suite_rates_scvx(*, epochs: int = 2000, reps: int = 10, theta: float = 16.0, seed: int = 0, workers: int = 1):
    """Slopes of mean ``dist_sq`` over the second half, against ``log(t + K)``."""
    prob = canonical_quadratic()
    w = metropolis_weights(build_graph("ring", prob.n))
    K = float(math.ceil(min_K(theta, w.rho_w, prob.L, prob.mu, prob.m)))
    sched = InverseTimeStep(theta, K, prob.m, prob.mu)
    ref = reference_solve(prob)
    x0 = shared_start(prob.n, prob.p)
    seeds = rep_seeds(seed, reps)
    bands = {"drr": (-2.3, -1.7), "dsgd": (-1.3, -0.7)}
    out = []
    for method, (lo, hi) in bands.items():
        rec = run_method(method, prob, w, x0, sched, epochs, seeds, ["dist_sq"], ref, workers=workers)
        fit = fit_rate(rec.mean("dist_sq"), window=(epochs // 2, epochs + 1), offset=K)
        out.append(
            Verdict(
                "rate_strongly_convex",
                {"method": method, "epochs": epochs, "reps": reps, "theta": theta, "K": K, "rho_w": w.rho_w},
                fit.as_dict(),
                {"slope_range": [lo, hi]},
                bool(lo <= fit.slope <= hi),
            )
        )
    return out


def best_so_far_series(prob, w, x0, scale: float, horizons, seeds, *, workers: int = 1, ref=None):
    """``min_{t <= T} mean_r ||grad f(xbar_t)||^2`` for each horizon ``T`` with ``alpha = scale / (m T^(1/3))``."""
    ref = reference_solve(prob) if ref is None else ref
    best = []
    for T in horizons:
        alpha = scale / (prob.m * T ** (1.0 / 3.0))
        rec = run_method("drr", prob, w, x0, ConstantStep(alpha), T, seeds, ["grad_norm_sq"], ref, workers=workers)
        best.append(float(np.min(rec.mean("grad_norm_sq"))))
    return best


def suite_rates_ncvx(
    *, horizons=(200, 400, 800, 1600), reps: int = 10, scale: float = 4.0, seed: int = 0, workers: int = 1
) -> list[Verdict]:
    prob = nonconvex_logistic()
    w = metropolis_weights(build_graph("grid", prob.n, rows=2, cols=4))
    x0 = shared_start(prob.n, prob.p)
    seeds = rep_seeds(seed, reps)
    best = best_so_far_series(prob, w, x0, scale, horizons, seeds, workers=workers)
    # four horizons sit below the five-point minimum of fit_rate; plain least squares instead
    slope = float(stats.linregress(np.log(horizons), np.log(best)).slope)
    lo, hi = -0.9, -0.45
    return [
        Verdict(
            "rate_nonconvex",
            {"horizons": list(horizons), "reps": reps, "scale": scale, "rho_w": w.rho_w},
            {"best_so_far": best, "slope": slope},
            {"slope_range": [lo, hi], "target": -2.0 / 3.0},
            bool(lo <= slope <= hi),
        )
    ]


def _constant_runs(alphas, *, epochs: int, reps: int, seed: int, metric: str, workers: int = 1):
    prob = canonical_quadratic()
    w = metropolis_weights(build_graph("ring", prob.n))
    ref = reference_solve(prob)
    x0 = shared_start(prob.n, prob.p)
    seeds = rep_seeds(seed, reps)
    series = [
        run_method("drr", prob, w, x0, ConstantStep(a), epochs, seeds, [metric], ref, workers=workers).mean(metric)
        for a in alphas
    ]
    return prob, w, series


def admissible_alpha(prob, w, fraction: float = 0.5) -> float:
    return fraction * check_admissible(ConstantStep(1.0), w.rho_w, prob.L, prob.mu, prob.m).threshold


def suite_floors(*, epochs: int = 2000, reps: int = 10, seed: int = 0, workers: int = 1) -> list[Verdict]:
    prob = canonical_quadratic()
    w = metropolis_weights(build_graph("ring", prob.n))
    alpha = admissible_alpha(prob, w)
    _, _, (s1, s2) = _constant_runs([alpha, alpha / 2], epochs=epochs, reps=reps, seed=seed, metric="dist_sq", workers=workers)
    return [check_floor_scaling(s1, s2, alpha)]


def suite_consensus(
    *, alphas=(1e-2, 5e-3, 2.5e-3), epochs: int = 2000, reps: int = 10, seed: int = 0, workers: int = 1
) -> list[Verdict]:
    _, w, series = _constant_runs(alphas, epochs=epochs, reps=reps, seed=seed, metric="consensus_sq", workers=workers)
    return [check_consensus_scaling(alphas, series, w.rho_w)]


def suite_lyapunov(*, epochs: int = 1500, reps: int = 20, seed: int = 0, n_mc: int = 2000, workers: int = 1):
    prob = canonical_quadratic()
    w = metropolis_weights(build_graph("ring", prob.n))
    alpha = admissible_alpha(prob, w)
    sched = ConstantStep(alpha)
    ref = reference_solve(prob)
    x0 = shared_start(prob.n, prob.p, scale=3.0)
    rec = run_method("drr", prob, w, x0, sched, epochs, rep_seeds(seed, reps), ["lyapunov_H"], ref, workers=workers)
    sh = sigma_shuffle_estimate(prob, ref.x_star, alpha, n_mc=n_mc, seed=seed)["estimate"]
    return [
        check_H_recursion(
            rec.mean("lyapunov_H"),
            rec.stderr("lyapunov_H"),
            sched,
            m=prob.m,
            mu=prob.mu,
            L=prob.L,
            rho_w=w.rho_w,
            sig_shuffle=sh,
            sig_star=sigma_star(prob, ref.x_star),
            runs=reps,
        )
    ]


SUITES: dict[str, Callable[..., list[Verdict]]] = {
    "contraction": suite_contraction,
    "sandwich": suite_sandwich,
    "rates_scvx": suite_rates_scvx,
    "rates_ncvx": suite_rates_ncvx,
    "floors": suite_floors,
    "consensus": suite_consensus,
    "lyapunov": suite_lyapunov,
}


def run_suite(name: str, **kwargs) -> list[Verdict]:
    if name not in SUITES:
        raise UnknownSuiteError(name)
    return SUITES[name](**kwargs)
