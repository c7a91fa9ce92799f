"""Distributed random reshuffling and its baselines.

All methods advance a stacked ``n x p`` block of agent iterates in synchronous
rounds and spend exactly ``n * m`` component-gradient evaluations per epoch:

* ``drr``   local step on the next shuffled component, then one mixing round
* ``egrr``  ``m`` local shuffled steps, one mixing round at the end of the epoch
* ``dsgd``  like ``drr`` but components are drawn uniformly with replacement
* ``crr``   centralised reshuffling on the network-average component
* ``sgd``   centralised with-replacement counterpart of ``crr``

Randomness comes from per-(agent, epoch) streams keyed on the master seed, so a
trajectory never depends on evaluation order or thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from drrlab.graphs import MixingMatrix
from drrlab.objectives import FiniteSumProblem

__all__ = [
    "AgentStateBlock",
    "PermutationStream",
    "SampleStream",
    "ConstantStep",
    "InverseTimeStep",
    "HyperbolicStep",
    "AdmissibilityReport",
    "DivergenceError",
    "METHODS",
    "check_admissible",
    "min_K",
    "drr_inner_step",
    "drr_epoch",
    "crr_epoch",
    "dsgd_epoch",
    "sgd_epoch",
    "epoch_gossip_rr_epoch",
    "limit_points",
    "iterate",
]

METHODS = ("drr", "crr", "dsgd", "sgd", "egrr")

DIVERGENCE_THRESHOLD = 1e12

_PERM_TAG = 0x5EED_0001
_SAMPLE_TAG = 0x5EED_0002


class DivergenceError(RuntimeError):
    def __init__(self, method: str, epoch: int, inner: int, value: float):
        self.method, self.epoch, self.inner, self.value = method, epoch, inner, value
        super().__init__(
            f"{method} diverged at epoch {epoch}, inner step {inner} (max |x| = {value:.3g}); stepsize too large?"
        )


@dataclass(frozen=True)
class AgentStateBlock:
    x: np.ndarray
    epoch: int = 0
    inner: int = 0
    grad_evals: int = 0

    @property
    def mean(self) -> np.ndarray:
        return self.x.mean(axis=0)


def _guard(x: np.ndarray, method: str, epoch: int, inner: int) -> None:
    peak = np.max(np.abs(x))
    if not np.isfinite(peak) or peak > DIVERGENCE_THRESHOLD:
        raise DivergenceError(method, epoch, inner, float(peak))


# ---------------------------------------------------------------------------
# random streams


class PermutationStream:
    """Uniform permutations of ``range(m)`` keyed on (master seed, agent, epoch)."""

    def __init__(self, seed: int, m: int):
        self.seed = int(seed)
        self.m = int(m)
        self._cache: tuple[int, int, np.ndarray] | None = None

    def perm(self, agent: int, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, _PERM_TAG, agent, epoch])
        return rng.permutation(self.m)

    def profile(self, epoch: int, n: int) -> np.ndarray:
        """``(n, m)`` array whose row ``i`` is agent ``i``'s permutation at ``epoch``."""
        if self._cache is not None and self._cache[:2] == (epoch, n):
            return self._cache[2]
        prof = np.stack([self.perm(i, epoch) for i in range(n)])
        self._cache = (epoch, n, prof)
        return prof


class SampleStream:
    """With-replacement component indices, ``m`` per agent per epoch."""

    def __init__(self, seed: int, m: int):
        self.seed = int(seed)
        self.m = int(m)

    def draws(self, agent: int, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, _SAMPLE_TAG, agent, epoch])
        return rng.integers(0, self.m, size=self.m)

    def profile(self, epoch: int, n: int) -> np.ndarray:
        return np.stack([self.draws(i, epoch) for i in range(n)])


# ---------------------------------------------------------------------------
# stepsizes


@dataclass(frozen=True)
class ConstantStep:
    alpha: float
    kind: str = field(default="constant", init=False)

    def __call__(self, t: int) -> float:
        return self.alpha

    @property
    def peak(self) -> float:
        return self.alpha


@dataclass(frozen=True)
class InverseTimeStep:
    """``alpha_t = theta / (m * mu * (t + K))``."""

    theta: float
    K: float
    m: int
    mu: float
    kind: str = field(default="inverse_time", init=False)

    def __post_init__(self):
        if self.theta <= 0 or self.K <= 0 or self.m < 1 or self.mu <= 0:
            raise ValueError("theta, K, m and mu must be positive")

    def __call__(self, t: int) -> float:
        return self.theta / (self.m * self.mu * (t + self.K))

    @property
    def peak(self) -> float:
        return self(0)


@dataclass(frozen=True)
class HyperbolicStep:
    """``alpha_t = 1 / (a t + b)``."""

    a: float
    b: float
    kind: str = field(default="hyperbolic", init=False)

    def __post_init__(self):
        if self.a < 0 or self.b <= 0:
            raise ValueError("need a >= 0 and b > 0")

    def __call__(self, t: int) -> float:
        return 1.0 / (self.a * t + self.b)

    @property
    def peak(self) -> float:
        return self(0)


@dataclass
class AdmissibilityReport:
    admissible: bool
    binding: str
    threshold: float
    alpha_max: float
    terms: dict[str, float]
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "admissible": self.admissible,
            "binding": self.binding,
            "threshold": self.threshold,
            "alpha_max": self.alpha_max,
            "terms": dict(self.terms),
            "warnings": list(self.warnings),
        }


def stepsize_terms(rho_w: float, L: float, mu: float) -> dict[str, float]:
    """The three upper limits whose minimum bounds an admissible stepsize.

    ``consensus`` has ``rho_w`` in a denominator and is taken as +inf when
    ``rho_w == 0`` (complete graph); ``contraction`` is vacuous when ``mu == 0``.
    """
    r2 = rho_w**2
    gap = 1.0 - r2
    if rho_w == 0.0:
        consensus = math.inf
    else:
        consensus = math.sqrt((2.0 - r2) / (24.0 * r2 * (5.0 - r2))) * gap / L
    contraction = gap / (2.0 * mu) if mu > 0 else math.inf
    coupling = gap * mu / (8.0 * math.sqrt(30.0) * L**2)
    return {"consensus": consensus, "contraction": contraction, "coupling": coupling}


def min_K(theta: float, rho_w: float, L: float, mu: float, m: int) -> float:
    """Smallest shift ``K`` keeping ``theta / (m mu (t+K))`` admissible for all t."""
    r2 = rho_w**2
    gap = 1.0 - r2
    parts = [
        theta / 2.0,
        math.sqrt(24.0 * r2 * (5.0 - r2) * L**2 * theta**2 / ((2.0 - r2) * gap**2 * m**2 * mu**2)),
        2.0 * theta / (m * gap),
        8.0 * math.sqrt(30.0) * L**2 * theta / (gap * m * mu**2),
    ]
    return max(parts)


def check_admissible(schedule, rho_w: float, L: float, mu: float, m: int) -> AdmissibilityReport:
    """Compare the schedule's largest stepsize against the admissible threshold."""
    terms = stepsize_terms(rho_w, L, mu)
    binding = min(terms, key=terms.get)
    threshold = terms[binding]
    alpha_max = float(schedule.peak)
    warnings = []
    if rho_w == 0.0:
        warnings.append("rho_w = 0: consensus limit treated as +inf")
    if isinstance(schedule, InverseTimeStep):
        if schedule.theta <= 12:
            warnings.append(f"theta = {schedule.theta:g}: theta > 12 required for the O(1/(t+K)^2) guarantee")
        if mu > 0:
            k_req = min_K(schedule.theta, rho_w, L, mu, m)
            terms["K_required"] = k_req
            if schedule.K < k_req:
                warnings.append(f"K = {schedule.K:g} below required {k_req:.6g}")
    ok = alpha_max <= threshold
    if not ok:
        warnings.append(f"peak stepsize {alpha_max:.6g} exceeds {binding} limit {threshold:.6g}")
    return AdmissibilityReport(ok, binding, threshold, alpha_max, terms, warnings)


# ---------------------------------------------------------------------------
# epoch updates

StepHook = Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]


def _mix(w, x):
    return w.w @ x if isinstance(w, MixingMatrix) else np.asarray(w) @ x


def _profile(perms, epoch: int, n: int) -> np.ndarray:
    if isinstance(perms, (PermutationStream, SampleStream)):
        return perms.profile(epoch, n)
    return np.asarray(perms)


def drr_inner_step(
    state: AgentStateBlock,
    w,
    prob: FiniteSumProblem,
    perms,
    alpha: float,
    *,
    method: str = "drr",
) -> AgentStateBlock:
    """``x <- W (x - alpha * grad F_{pi_l}(x))`` for inner index ``state.inner``."""
    l = state.inner
    if l >= prob.m:
        raise ValueError(f"inner index {l} already at epoch end (m={prob.m})")
    idx = _profile(perms, state.epoch, prob.n)[:, l]
    grads = prob.agent_gradients(state.x, idx)
    x_new = _mix(w, state.x - alpha * grads)
    _guard(x_new, method, state.epoch, l)
    return replace(state, x=x_new, inner=l + 1, grad_evals=state.grad_evals + prob.n)


def drr_epoch(state, w, prob, perms, schedule, *, on_step: StepHook | None = None) -> AgentStateBlock:
    """One full D-RR epoch: ``m`` shuffled local steps, each followed by mixing.

    ``on_step(l, x_before, grads, x_after)`` fires after every inner step.
    """
    if state.inner != 0:
        raise ValueError("epoch must start at inner index 0")
    alpha = schedule(state.epoch)
    prof = _profile(perms, state.epoch, prob.n)
    x, evals = state.x, state.grad_evals
    for l in range(prob.m):
        grads = prob.agent_gradients(x, prof[:, l])
        x_new = _mix(w, x - alpha * grads)
        _guard(x_new, "drr", state.epoch, l)
        if on_step is not None:
            on_step(l, x, grads, x_new)
        x = x_new
        evals += prob.n
    return AgentStateBlock(x=x, epoch=state.epoch + 1, inner=0, grad_evals=evals)


def dsgd_epoch(state, w, prob, rng: SampleStream, schedule, *, on_step: StepHook | None = None) -> AgentStateBlock:
    """Adapt-then-combine DSGD: ``m`` with-replacement local steps, each followed by mixing."""
    if state.inner != 0:
        raise ValueError("epoch must start at inner index 0")
    alpha = schedule(state.epoch)
    draws = rng.profile(state.epoch, prob.n)
    x, evals = state.x, state.grad_evals
    for l in range(prob.m):
        grads = prob.agent_gradients(x, draws[:, l])
        x_new = _mix(w, x - alpha * grads)
        _guard(x_new, "dsgd", state.epoch, l)
        if on_step is not None:
            on_step(l, x, grads, x_new)
        x = x_new
        evals += prob.n
    return AgentStateBlock(x=x, epoch=state.epoch + 1, inner=0, grad_evals=evals)


def epoch_gossip_rr_epoch(state, w, prob, perms, schedule, *, on_step: StepHook | None = None) -> AgentStateBlock:
    """``m`` local shuffled steps with no communication, then a single mixing round.

    Mirrors the epoch-wise communication pattern of proximal RR baselines; it
    is not a reimplementation of any particular published method.
    """
    if state.inner != 0:
        raise ValueError("epoch must start at inner index 0")
    alpha = schedule(state.epoch)
    prof = _profile(perms, state.epoch, prob.n)
    x, evals = state.x, state.grad_evals
    for l in range(prob.m):
        grads = prob.agent_gradients(x, prof[:, l])
        x_new = x - alpha * grads
        if l == prob.m - 1:
            x_new = _mix(w, x_new)
        _guard(x_new, "egrr", state.epoch, l)
        if on_step is not None:
            on_step(l, x, grads, x_new)
        x = x_new
        evals += prob.n
    return AgentStateBlock(x=x, epoch=state.epoch + 1, inner=0, grad_evals=evals)


def _centralized_epoch(x, prob, order, alpha, method, epoch):
    n = prob.n
    for l, comp in enumerate(order):
        X = np.broadcast_to(x, (n, prob.p))
        grads = prob.agent_gradients(X, np.full(n, comp))
        x = x - (alpha / n) * grads.sum(axis=0)
        _guard(x, method, epoch, l)
    return x


def crr_epoch(x: np.ndarray, prob: FiniteSumProblem, perm, alpha: float, *, epoch: int = 0) -> np.ndarray:
    """Centralised RR: one shared permutation, steps on the network-average component."""
    return _centralized_epoch(np.asarray(x, float), prob, np.asarray(perm), alpha, "crr", epoch)


def sgd_epoch(x: np.ndarray, prob: FiniteSumProblem, draws, alpha: float, *, epoch: int = 0) -> np.ndarray:
    """Centralised SGD: ``m`` with-replacement steps on the network-average component."""
    return _centralized_epoch(np.asarray(x, float), prob, np.asarray(draws), alpha, "sgd", epoch)


def limit_points(prob: FiniteSumProblem, x_star, profile, alpha: float, grads_at_star=None) -> np.ndarray:
    """Intra-epoch targets ``x* - alpha * sum_{k<l} (1/n) sum_i grad f_{i, pi_k^i}(x*)``, l = 0..m.

    ``profile`` is ``(n, m)`` (one permutation per agent) or ``(m,)`` shared.
    Returns an ``(m + 1, p)`` array; first and last rows equal ``x*`` up to rounding.
    """
    x_star = np.asarray(x_star, float)
    g = prob.all_component_gradients(x_star) if grads_at_star is None else grads_at_star
    prof = np.asarray(profile)
    if prof.ndim == 1:
        prof = np.broadcast_to(prof, (prob.n, prob.m))
    per_step = g[np.arange(prob.n)[:, None], prof].mean(axis=0)  # (m, p)
    offsets = np.vstack([np.zeros((1, prob.p)), np.cumsum(per_step, axis=0)])
    return x_star - alpha * offsets


# ---------------------------------------------------------------------------
# drivers


def iterate(
    method: str,
    prob: FiniteSumProblem,
    w: MixingMatrix,
    x0: np.ndarray,
    schedule,
    epochs: int,
    seed: int,
    *,
    on_step: StepHook | None = None,
) -> Iterator[AgentStateBlock]:
    """Yield the state at every epoch boundary ``t = 0..epochs``.

    ``x0`` is the ``(n, p)`` initial block; centralised methods start from its
    row mean and report a block with identical rows.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    x0 = np.array(x0, dtype=float)
    if x0.shape != (prob.n, prob.p):
        raise ValueError(f"initial block must be {(prob.n, prob.p)}, got {x0.shape}")
    perms = PermutationStream(seed, prob.m)
    draws = SampleStream(seed, prob.m)
    state = AgentStateBlock(x=x0)
    yield state
    if method in ("crr", "sgd"):
        x = x0.mean(axis=0) if prob.n > 1 else x0[0]
        for t in range(epochs):
            alpha = schedule(t)
            if method == "crr":
                x = crr_epoch(x, prob, perms.perm(0, t), alpha, epoch=t)
            else:
                x = sgd_epoch(x, prob, draws.draws(0, t), alpha, epoch=t)
            state = AgentStateBlock(
                x=np.tile(x, (prob.n, 1)), epoch=t + 1, grad_evals=state.grad_evals + prob.n * prob.m
            )
            yield state
        return
    step = {"drr": drr_epoch, "egrr": epoch_gossip_rr_epoch}.get(method)
    for _ in range(epochs):
        if method == "dsgd":
            state = dsgd_epoch(state, w, prob, draws, schedule, on_step=on_step)
        else:
            state = step(state, w, prob, perms, schedule, on_step=on_step)
        yield state
