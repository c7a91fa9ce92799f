"""Automated pass/fail verdicts for the quantitative claims about D-RR.

Every check returns a :class:`Verdict` (or a list of them) that serialises to
``{check, params, measured, threshold, pass}``. Expectation claims are tested
on averages over independent runs with an explicit Monte-Carlo slack.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from drrlab.graphs import MixingMatrix, spectral_gap
from drrlab.metrics import sigma_shuffle_estimate, sigma_star
from drrlab.objectives import QuadraticProblem
from drrlab.optimizers import check_admissible

__all__ = [
    "Verdict",
    "RateFit",
    "CheckError",
    "check_contraction",
    "check_variance_sandwich",
    "fit_rate",
    "plateau",
    "check_floor_scaling",
    "check_consensus_scaling",
    "h_recursion_bound",
    "check_H_recursion",
    "report_json",
]

CONTRACTION_SLACK = 1e-9
MIN_FIT_POINTS = 5
FLOOR_RATIO_RANGE = (3.0, 6.0)
CONSENSUS_SLOPE_RANGE = (1.6, 2.4)
H_PASS_FRACTION = 0.95
PLATEAU_DRIFT_TOL = 0.2


class CheckError(ValueError):
    """A check's precondition is violated (too few points, no plateau, ...)."""


@dataclass
class Verdict:
    check: str
    params: dict
    measured: dict
    threshold: dict
    passed: bool
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "check": self.check,
            "params": _plain(self.params),
            "measured": _plain(self.measured),
            "threshold": _plain(self.threshold),
            "pass": bool(self.passed),
            "notes": list(self.notes),
        }


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def report_json(verdicts, indent: int = 2) -> str:
    return json.dumps([v.as_dict() for v in verdicts], indent=indent, sort_keys=True)


# ---------------------------------------------------------------------------
# mixing


def check_contraction(w: MixingMatrix | np.ndarray, trials: int = 1000, seed: int = 0, p: int = 3) -> Verdict:
    """Random-state test of ``||W x - 1 xbar^T|| <= rho_w ||x - 1 xbar^T||``.

    States are Gaussian ``n x p`` blocks (Frobenius norm); one extra trial uses
    an already consensual block, for which both sides vanish.
    """
    mat = w.w if isinstance(w, MixingMatrix) else np.asarray(w, float)
    rho = w.rho_w if isinstance(w, MixingMatrix) else spectral_gap(mat)
    n = mat.shape[0]
    rng = np.random.default_rng(seed)
    states = rng.standard_normal((trials, n, p))
    states = np.concatenate([states, np.broadcast_to(rng.standard_normal(p), (1, n, p))])
    worst, violations = 0.0, 0
    for x in states:
        dev = x - x.mean(axis=0)
        mixed = mat @ x
        lhs = np.linalg.norm(mixed - mixed.mean(axis=0))
        rhs = np.linalg.norm(dev)
        if lhs > rho * rhs + CONTRACTION_SLACK:
            violations += 1
        # a consensual block leaves only rounding noise in the deviation
        if rhs > 1e-12 * max(1.0, np.linalg.norm(x)):
            worst = max(worst, lhs / rhs)
    return Verdict(
        "contraction",
        {"n": n, "trials": trials, "seed": seed, "p": p},
        {"worst_ratio": worst, "violations": violations},
        {"rho_w": rho, "slack": CONTRACTION_SLACK},
        violations == 0,
    )


# ---------------------------------------------------------------------------
# shuffling variance


def check_variance_sandwich(
    prob: QuadraticProblem, alphas, n_mc: int = 2000, seed: int = 0, *, x_star=None
) -> list[Verdict]:
    """``alpha^2 mu m sigma_*^2 / 8 <= sigma_shuffle^2 <= alpha^2 L m sigma_*^2 / 4`` with 3-se slack."""
    if not isinstance(prob, QuadraticProblem) or not prob.strongly_convex:
        raise CheckError("variance sandwich needs a strongly convex quadratic (exact mu and L)")
    if x_star is None:
        x_star = prob.closed_form_solution()
    s2 = sigma_star(prob, x_star)
    out = []
    for a in alphas:
        est = sigma_shuffle_estimate(prob, x_star, float(a), n_mc=n_mc, seed=seed)
        lo = a**2 * prob.mu * prob.m * s2 / 8.0
        hi = a**2 * prob.L * prob.m * s2 / 4.0
        se = est["mc_stderr"]
        val = est["estimate"]
        ok_lo = val >= lo - 3.0 * se
        ok_hi = val <= hi + 3.0 * se
        notes = []
        if not ok_lo:
            notes.append("lower bound violated")
        if not ok_hi:
            notes.append("upper bound violated")
        out.append(
            Verdict(
                "variance_sandwich",
                {"alpha": a, "n": prob.n, "m": prob.m, "n_mc": n_mc, "seed": seed},
                {"sigma_shuffle": val, "mc_stderr": se, "sigma_star": s2, "exact": est["exact"]},
                {"lower": lo, "upper": hi, "slack": 3.0 * se},
                bool(ok_lo and ok_hi),
                notes,
            )
        )
    return out


# ---------------------------------------------------------------------------
# rate fits


@dataclass
class RateFit:
    times: np.ndarray
    values: np.ndarray
    slope: float
    halfwidth: float
    intercept: float
    window: tuple[int, int]

    def as_dict(self) -> dict:
        return {
            "slope": self.slope,
            "ci95_halfwidth": self.halfwidth,
            "intercept": self.intercept,
            "window": list(self.window),
            "points": int(len(self.times)),
        }


def fit_rate(values, times=None, *, window=None, burn_in: float = 0.5, offset: float = 0.0) -> RateFit:
    """Least-squares slope of ``log value`` against ``log(time + offset)``.

    ``times`` defaults to ``0, 1, ...``. Without an explicit ``window`` (a
    ``(start, stop)`` slice into the series) the first ``burn_in`` fraction is
    dropped. The half-width is the 95% Student-t interval of the slope.
    """
    v = np.asarray(values, float)
    t = np.arange(len(v), dtype=float) if times is None else np.asarray(times, float)
    if t.shape != v.shape:
        raise CheckError(f"times{t.shape} and values{v.shape} differ in length")
    if window is None:
        window = (int(math.floor(burn_in * len(v))), len(v))
    lo, hi = window
    tw, vw = t[lo:hi] + offset, v[lo:hi]
    if len(vw) < MIN_FIT_POINTS:
        raise CheckError(f"rate fit needs at least {MIN_FIT_POINTS} points, window has {len(vw)}")
    if np.any(~np.isfinite(vw)) or np.any(vw <= 0):
        raise CheckError("nonpositive or non-finite values in fit window (diverged or at numerical floor)")
    if np.any(tw <= 0):
        raise CheckError("fit abscissa must be positive; raise the offset or trim the window")
    x, y = np.log(tw), np.log(vw)
    res = stats.linregress(x, y)
    dof = len(x) - 2
    half = float(stats.t.ppf(0.975, dof) * res.stderr) if dof > 0 else math.inf
    return RateFit(tw, vw, float(res.slope), half, float(res.intercept), (lo, hi))


# ---------------------------------------------------------------------------
# plateaus


def plateau(series, *, drift_tol: float = PLATEAU_DRIFT_TOL) -> float:
    """Mean of the last quarter of a series, after checking it has settled.

    The two halves of the last quarter must agree to ``drift_tol`` relative,
    otherwise the run is still moving and :class:`CheckError` is raised. A
    series that never left its starting value (stepsize too small to make
    progress) is rejected as well.
    """
    v = np.asarray(series, float)
    q = len(v) // 4
    if q < 4:
        raise CheckError(f"series of length {len(v)} too short to judge a plateau")
    tail = v[-q:]
    if not np.all(np.isfinite(tail)):
        raise CheckError("plateau not reached: non-finite values in last quarter")
    first, second = tail[: q // 2].mean(), tail[q // 2 :].mean()
    level = tail.mean()
    if level <= 0 or abs(first - second) > drift_tol * level:
        raise CheckError(
            f"plateau not reached: last-quarter halves {first:.4g} vs {second:.4g} (tolerance {drift_tol:g} relative)"
        )
    start = v[0]
    if abs(start - level) <= drift_tol * max(abs(start), level):
        raise CheckError(f"plateau not reached: run never left its initial value {start:.4g}")
    return float(level)


def check_floor_scaling(series_alpha, series_half, alpha: float, *, drift_tol: float = PLATEAU_DRIFT_TOL) -> Verdict:
    """Plateau ratio between runs at ``alpha`` and ``alpha / 2`` should sit in [3, 6]."""
    f1 = plateau(series_alpha, drift_tol=drift_tol)
    f2 = plateau(series_half, drift_tol=drift_tol)
    ratio = f1 / f2
    lo, hi = FLOOR_RATIO_RANGE
    return Verdict(
        "floor_scaling",
        {"alpha": alpha, "alpha_half": alpha / 2.0},
        {"floor_alpha": f1, "floor_half": f2, "ratio": ratio},
        {"ratio_range": [lo, hi]},
        bool(lo <= ratio <= hi),
    )


def check_consensus_scaling(
    alphas, series_list, rho_w: float, *, drift_tol: float = PLATEAU_DRIFT_TOL, eps: float = 1e-20
) -> Verdict:
    """Log-log slope of plateau consensus error against ``alpha`` should sit in [1.6, 2.4]."""
    alphas = [float(a) for a in alphas]
    if len(alphas) < 3 or len(series_list) != len(alphas):
        raise CheckError(f"consensus scaling needs at least 3 stepsizes with one series each, got {len(alphas)}")
    lo, hi = CONSENSUS_SLOPE_RANGE
    if rho_w == 0.0:
        levels = [float(np.max(np.abs(s))) for s in series_list]
        return Verdict(
            "consensus_scaling",
            {"alphas": alphas, "rho_w": rho_w},
            {"max_consensus": max(levels), "status": "exact-consensus"},
            {"slope_range": [lo, hi]},
            bool(max(levels) <= eps),
            ["skipped: rho_w = 0 mixes to exact consensus every round"],
        )
    levels = [plateau(s, drift_tol=drift_tol) for s in series_list]
    res = stats.linregress(np.log(alphas), np.log(levels))
    return Verdict(
        "consensus_scaling",
        {"alphas": alphas, "rho_w": rho_w},
        {"plateaus": levels, "slope": float(res.slope)},
        {"slope_range": [lo, hi]},
        bool(lo <= res.slope <= hi),
    )


# ---------------------------------------------------------------------------
# Lyapunov recursion


def h_recursion_bound(h_t: float, alpha: float, m: int, mu: float, L: float, rho_w: float, sig_shuffle, sig_star) -> float:
    """Right-hand side of the one-epoch recursion for ``H``.

    ``(1 - a mu/4)^m H_t + 2 [a s_sh (1 + 240 a^2 r^2 L^3 / (mu g^2)) + 120 a^3 r^2 L^2 s_* / (mu g^2)] sum_{k<m} (1 - a mu/4)^k``
    with ``g = 1 - rho_w^2``.
    """
    c = 1.0 - alpha * mu / 4.0
    r2 = rho_w**2
    g2 = (1.0 - r2) ** 2
    bracket = alpha * sig_shuffle * (1.0 + 240.0 * alpha**2 * r2 * L**3 / (mu * g2))
    bracket += 120.0 * alpha**3 * r2 * L**2 * sig_star / (mu * g2)
    geo = sum(c**k for k in range(m))
    return c**m * h_t + 2.0 * bracket * geo


def check_H_recursion(
    h_mean,
    h_stderr,
    schedule,
    *,
    m: int,
    mu: float,
    L: float,
    rho_w: float,
    sig_shuffle,
    sig_star: float,
    runs: int,
) -> Verdict:
    """Epoch-by-epoch test of the ``H`` recursion on run-averaged values.

    ``sig_shuffle`` is a float or a callable ``alpha -> estimate``. Slack at
    epoch ``t`` is ``3 * sqrt(se_{t+1}^2 + c^{2m} se_t^2)``.
    """
    rep = check_admissible(schedule, rho_w, L, mu, m)
    if not rep.admissible:
        raise CheckError(f"schedule not admissible: {rep.warnings}")
    if runs < 20:
        raise CheckError(f"H recursion check needs at least 20 averaged runs, got {runs}")
    h = np.asarray(h_mean, float)
    se = np.asarray(h_stderr, float)
    T = len(h) - 1
    ok = np.zeros(T, dtype=bool)
    margins = np.empty(T)
    cache: dict[float, float] = {}
    for t in range(T):
        a = float(schedule(t))
        if callable(sig_shuffle):
            if a not in cache:
                cache[a] = float(sig_shuffle(a))
            s_sh = cache[a]
        else:
            s_sh = float(sig_shuffle)
        c = 1.0 - a * mu / 4.0
        if not 0.0 < c**m < 1.0 and a > 0:
            raise CheckError(f"contraction factor {c**m} outside (0, 1) at epoch {t}")
        rhs = h_recursion_bound(h[t], a, m, mu, L, rho_w, s_sh, sig_star)
        slack = 3.0 * math.sqrt(se[t + 1] ** 2 + c ** (2 * m) * se[t] ** 2)
        margins[t] = rhs + slack - h[t + 1]
        ok[t] = margins[t] >= 0
    frac = float(ok.mean()) if T else 1.0
    return Verdict(
        "H_recursion",
        {"epochs": T, "m": m, "mu": mu, "L": L, "rho_w": rho_w, "runs": runs, "schedule": schedule.kind},
        {"pass_fraction": frac, "worst_margin": float(margins.min()) if T else 0.0, "sigma_star": sig_star},
        {"min_fraction": H_PASS_FRACTION},
        frac >= H_PASS_FRACTION,
        ["sigma_shuffle enters as its max-over-l estimate, which can only loosen the bound"],
    )
