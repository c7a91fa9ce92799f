"""Reference solutions and the measured quantities tracked along trajectories."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from drrlab.objectives import FiniteSumProblem, QuadraticProblem
from drrlab.optimizers import limit_points

__all__ = [
    "ReferenceSolution",
    "MetricSample",
    "SolverError",
    "reference_solve",
    "sigma_star",
    "sigma_shuffle_estimate",
    "bregman_gap",
    "lyapunov_weight",
    "lyapunov_H",
    "lyapunov_Q",
    "metric_sample",
    "consensus_sq",
]


class SolverError(RuntimeError):
    pass


@dataclass
class ReferenceSolution:
    x_star: np.ndarray
    f_star: float
    grad_norm_at_solution: float
    iterations: int
    tol: float
    converged: bool
    approximate: bool = False
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "x_star": self.x_star.tolist(),
            "f_star": self.f_star,
            "grad_norm": self.grad_norm_at_solution,
            "iterations": self.iterations,
            "tol": self.tol,
            "converged": self.converged,
            "approximate": self.approximate,
            "notes": list(self.notes),
        }


def _descend(prob, x, tol, max_iter):
    step = 1.0 / prob.L
    g = prob.full_gradient(x)
    for k in range(max_iter):
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return x, gn, k, True
        x = x - step * g
        g = prob.full_gradient(x)
    return x, float(np.linalg.norm(g)), max_iter, float(np.linalg.norm(g)) <= tol


def reference_solve(
    prob: FiniteSumProblem,
    tol: float = 1e-11,
    max_iter: int = 500_000,
    *,
    x0=None,
    starts: int = 5,
    seed: int = 0,
) -> ReferenceSolution:
    """Full-gradient descent with stepsize ``1/L`` until ``||grad f|| <= tol``.

    Quadratics are also solved in closed form and the two answers must agree to
    1e-9. Problems without strong convexity get ``starts`` descents from random
    points and the lowest value is kept; that ``f_star`` is only an estimate of
    the infimum and the solution is flagged ``approximate``.
    """
    p = prob.p
    if prob.strongly_convex:
        x_init = np.zeros(p) if x0 is None else np.asarray(x0, float)
        x, gn, its, ok = _descend(prob, x_init, tol, max_iter)
        if not ok:
            raise SolverError(f"gradient descent stopped at ||grad|| = {gn:.3e} > tol {tol:.1e} after {its} iterations")
        notes = []
        if isinstance(prob, QuadraticProblem):
            exact = prob.closed_form_solution()
            gap = float(np.max(np.abs(exact - x)))
            if gap > 1e-9:
                raise SolverError(f"descent and closed form disagree by {gap:.3e}")
            notes.append(f"closed-form cross-check max deviation {gap:.2e}")
        return ReferenceSolution(x, prob.value(x), gn, its, tol, True, notes=notes)

    rng = np.random.default_rng(seed)
    inits = [np.zeros(p) if x0 is None else np.asarray(x0, float)]
    inits += [rng.standard_normal(p) for _ in range(max(starts, 1) - 1)]
    best = None
    for x_init in inits:
        x, gn, its, ok = _descend(prob, x_init, tol, max_iter)
        fx = prob.value(x)
        if best is None or fx < best[1]:
            best = (x, fx, gn, its, ok)
    x, fx, gn, its, ok = best
    notes = [f"multi-start estimate over {len(inits)} starts; f_star is an upper estimate of the infimum"]
    return ReferenceSolution(x, fx, gn, its, tol, ok, approximate=True, notes=notes)


def sigma_star(prob: FiniteSumProblem, x_star) -> float:
    """Mean squared component-gradient norm at the optimum."""
    g = prob.all_component_gradients(np.asarray(x_star, float))
    return float(np.mean(np.sum(g**2, axis=-1)))


def bregman_gap(prob: FiniteSumProblem, profile_column, y, x) -> float:
    """``D_s(y, x) = s(y) - s(x) - <grad s(x), y - x>`` for ``s = (1/n) sum_i f_{i, col_i}``."""
    n = prob.n
    col = np.asarray(profile_column)
    y = np.asarray(y, float)
    x = np.asarray(x, float)
    sy = prob.agent_values(np.broadcast_to(y, (n, prob.p)), col).mean()
    sx = prob.agent_values(np.broadcast_to(x, (n, prob.p)), col).mean()
    gx = prob.agent_gradients(np.broadcast_to(x, (n, prob.p)), col).mean(axis=0)
    return float(sy - sx - gx @ (y - x))


def _profile_gaps(prob, x_star, profile, alpha, grads, vals_star):
    """``D_{s_l}(xbar_*^l, x*)`` for l = 0..m-1 under one permutation profile."""
    pts = limit_points(prob, x_star, profile, alpha, grads_at_star=grads)
    n, m = prob.n, prob.m
    ar = np.arange(n)
    out = np.empty(m)
    for l in range(m):
        col = profile[:, l]
        y = pts[l]
        sy = prob.agent_values(np.broadcast_to(y, (n, prob.p)), col).mean()
        sx = vals_star[ar, col].mean()
        gx = grads[ar, col].mean(axis=0)
        out[l] = sy - sx - gx @ (y - x_star)
    return out


def sigma_shuffle_estimate(
    prob: FiniteSumProblem,
    x_star,
    alpha: float,
    n_mc: int = 2000,
    seed: int = 0,
    *,
    exact: bool | None = None,
) -> dict:
    """Shuffling variance: max over ``l`` of ``E D_{s_l}(xbar_*^l, x*)``.

    Each agent draws an independent permutation. When the number of profiles
    ``(m!)^n`` is at most ``n_mc`` (or ``exact=True``) the expectation is an
    exact average over all profiles and the standard error is 0; otherwise it
    is a Monte-Carlo mean over ``n_mc`` draws, and ``mc_stderr`` is the
    standard error at the maximising ``l``.
    """
    x_star = np.asarray(x_star, float)
    n, m = prob.n, prob.m
    if alpha == 0.0 or m == 1:
        return {"estimate": 0.0, "mc_stderr": 0.0, "argmax": 0, "exact": True, "per_l": [0.0] * m}
    grads = prob.all_component_gradients(x_star)
    vals = prob.all_component_values(x_star)
    n_profiles = math.factorial(m) ** n
    use_exact = (n_profiles <= n_mc) if exact is None else exact
    if use_exact:
        perms = list(itertools.permutations(range(m)))
        samples = [
            _profile_gaps(prob, x_star, np.array(prof), alpha, grads, vals)
            for prof in itertools.product(perms, repeat=n)
        ]
    else:
        rng = np.random.default_rng(seed)
        samples = [
            _profile_gaps(prob, x_star, np.stack([rng.permutation(m) for _ in range(n)]), alpha, grads, vals)
            for _ in range(n_mc)
        ]
    samples = np.asarray(samples)
    means = samples.mean(axis=0)
    k = int(np.argmax(means))
    se = 0.0 if use_exact else float(samples[:, k].std(ddof=1) / math.sqrt(len(samples)))
    return {
        "estimate": float(means[k]),
        "mc_stderr": se,
        "argmax": k,
        "exact": bool(use_exact),
        "per_l": means.tolist(),
    }


def consensus_sq(x: np.ndarray) -> float:
    """``||x - 1 xbar^T||_F^2``."""
    return float(np.sum((x - x.mean(axis=0)) ** 2))


def lyapunov_weight(alpha: float, L: float, mu: float, n: int, rho_w: float) -> float:
    """``16 alpha L^2 / (n mu (1 - rho_w^2))``."""
    return 16.0 * alpha * L**2 / (n * mu * (1.0 - rho_w**2))


def lyapunov_H(x: np.ndarray, target, omega: float) -> float:
    """``||xbar - target||^2 + omega * ||x - 1 xbar^T||^2`` for a single realisation."""
    xbar = x.mean(axis=0)
    return float(np.sum((xbar - np.asarray(target)) ** 2) + omega * consensus_sq(x))


def lyapunov_Q(prob: FiniteSumProblem, x: np.ndarray, alpha: float, f_bar: float, rho_w: float) -> float:
    """``f(xbar) - f_bar + 16 alpha L^2 / (n (1 - rho_w^2)^2) * ||x - 1 xbar^T||^2``."""
    coef = 16.0 * alpha * prob.L**2 / (prob.n * (1.0 - rho_w**2) ** 2)
    return float(prob.value(x.mean(axis=0)) - f_bar + coef * consensus_sq(x))


@dataclass
class MetricSample:
    epoch: int
    dist_sq: float
    consensus_sq: float
    grad_norm_sq: float
    f_gap: float
    lyapunov_H: float | None = None
    lyapunov_Q: float | None = None


def metric_sample(
    prob: FiniteSumProblem,
    x: np.ndarray,
    epoch: int,
    x_star,
    f_star: float,
    *,
    want_gradient: bool = True,
) -> MetricSample:
    xbar = x.mean(axis=0)
    dist = float(np.mean(np.sum((x - x_star) ** 2, axis=1)))
    cons = consensus_sq(x)
    if want_gradient:
        g = prob.full_gradient(xbar)
        gn = float(g @ g)
        fgap = prob.value(xbar) - f_star
    else:
        gn = fgap = math.nan
    return MetricSample(epoch, dist, cons, gn, fgap)
