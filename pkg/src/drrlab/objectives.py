"""Finite-sum objectives split over n agents with m components each.

Every problem exposes the global objective ``f(x) = (1/n) sum_i f_i(x)`` with
``f_i = (1/m) sum_l f_{i,l}`` together with per-component oracles. Batched
oracles (``agent_gradients``) evaluate one component per agent in a single
vectorised call, which is what the optimizers use on the hot path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "FiniteSumProblem",
    "QuadraticProblem",
    "LogisticProblem",
    "make_quadratic",
    "make_logistic",
    "component_gradient",
    "full_gradient",
    "constants",
    "estimate_L_mu",
    "regularizer_curvature",
    "PROBLEM_KINDS",
]

PROBLEM_KINDS = ("quadratic", "logistic_l2", "logistic_sigmoidal")


def regularizer_curvature(lo: float = -10.0, hi: float = 10.0, points: int = 200_001) -> float:
    """Largest |d^2/dx^2 [x^2 / (1 + x^2)]| found on a uniform grid.

    The second derivative is ``(2 - 6x^2) / (1 + x^2)^3``; its supremum (2, at
    the origin) is what bounds the Hessian of the sigmoidal regularizer.
    """
    x = np.linspace(lo, hi, points)
    return float(np.max(np.abs((2.0 - 6.0 * x**2) / (1.0 + x**2) ** 3)))


SIGMOIDAL_CURVATURE = regularizer_curvature()


class FiniteSumProblem:
    """Common interface; subclasses fill in the component oracles."""

    kind: str
    n: int
    m: int
    p: int
    mu: float
    L: float
    lower_bounds: np.ndarray

    @property
    def strongly_convex(self) -> bool:
        return self.mu > 0

    def _check_index(self, i: int, l: int) -> None:
        if not (0 <= i < self.n):
            raise IndexError(f"agent index {i} out of range [0, {self.n})")
        if not (0 <= l < self.m):
            raise IndexError(f"component index {l} out of range [0, {self.m})")

    # -- per-component oracles ------------------------------------------------
    def component_value(self, i: int, l: int, x: np.ndarray) -> float:
        self._check_index(i, l)
        return float(self.agent_values(np.asarray(x, float)[None, :], np.array([l]), agents=np.array([i]))[0])

    def component_gradient(self, i: int, l: int, x: np.ndarray) -> np.ndarray:
        self._check_index(i, l)
        return self.agent_gradients(np.asarray(x, float)[None, :], np.array([l]), agents=np.array([i]))[0]

    # -- batched oracles --------------------------------------------------------
    def agent_gradients(self, X: np.ndarray, idx: np.ndarray, agents: np.ndarray | None = None) -> np.ndarray:
        """Row k: gradient of ``f_{agents[k], idx[k]}`` at ``X[k]``. ``agents`` defaults to 0..n-1."""
        raise NotImplementedError

    def agent_values(self, X: np.ndarray, idx: np.ndarray, agents: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError

    def all_component_gradients(self, x: np.ndarray) -> np.ndarray:
        """``(n, m, p)`` array of every component gradient at one point."""
        raise NotImplementedError

    def all_component_values(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- global objective -----------------------------------------------------
    def value(self, x: np.ndarray) -> float:
        return float(np.mean(self.all_component_values(np.asarray(x, float))))

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        g = self.all_component_gradients(np.asarray(x, float))
        return g.reshape(-1, self.p).mean(axis=0)


def _agents(agents, count):
    return np.arange(count) if agents is None else np.asarray(agents)


@dataclass(frozen=True, eq=False)
class QuadraticProblem(FiniteSumProblem):
    """Components ``f_{i,l}(x) = 1/2 x^T Q_{il} x - b_{il}^T x``."""

    Q: np.ndarray  # (n, m, p, p)
    b: np.ndarray  # (n, m, p)

    kind = "quadratic"

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if Q.ndim != 4 or Q.shape[2] != Q.shape[3] or b.shape != Q.shape[:3]:
            raise ValueError(f"inconsistent quadratic shapes Q{Q.shape} b{b.shape}")
        if not np.allclose(Q, np.swapaxes(Q, -1, -2), atol=1e-12):
            raise ValueError("quadratic matrices must be symmetric")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "b", b)
        eig = np.linalg.eigvalsh(Q)
        object.__setattr__(self, "_eig", eig)
        sol = np.linalg.solve(Q, b[..., None])[..., 0] if eig.min() > 0 else None
        lb = -0.5 * np.einsum("nmp,nmp->nm", b, sol) if sol is not None else np.full(Q.shape[:2], -np.inf)
        object.__setattr__(self, "lower_bounds", lb)

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def m(self):
        return self.Q.shape[1]

    @property
    def p(self):
        return self.Q.shape[2]

    @property
    def mu(self):
        return float(max(self._eig.min(), 0.0))

    @property
    def L(self):
        return float(self._eig.max())

    def agent_gradients(self, X, idx, agents=None):
        a = _agents(agents, len(idx))
        return np.einsum("kpq,kq->kp", self.Q[a, idx], X) - self.b[a, idx]

    def agent_values(self, X, idx, agents=None):
        a = _agents(agents, len(idx))
        Qx = np.einsum("kpq,kq->kp", self.Q[a, idx], X)
        return 0.5 * np.einsum("kp,kp->k", X, Qx) - np.einsum("kp,kp->k", self.b[a, idx], X)

    def all_component_gradients(self, x):
        return np.einsum("nmpq,q->nmp", self.Q, x) - self.b

    def all_component_values(self, x):
        return 0.5 * np.einsum("p,nmpq,q->nm", x, self.Q, x) - self.b @ x

    def closed_form_solution(self) -> np.ndarray:
        return np.linalg.solve(self.Q.sum(axis=(0, 1)), self.b.sum(axis=(0, 1)))


@dataclass(frozen=True, eq=False)
class LogisticProblem(FiniteSumProblem):
    """Mini-batch logistic loss plus an l2 or sigmoidal regularizer.

    ``features`` is ``(n, m, B, p)`` with zero padding, ``weights`` holds
    ``1/|batch|`` on real samples and 0 on padding so that every component is
    the average loss over its mini-batch.
    """

    features: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    reg: str = "l2"  # "l2" or "sigmoidal"
    rho: float = 0.2
    eta: float = 0.2

    def __post_init__(self):
        F = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        wts = np.asarray(self.weights, dtype=float)
        if F.ndim != 4 or y.shape != F.shape[:3] or wts.shape != F.shape[:3]:
            raise ValueError(f"inconsistent logistic shapes features{F.shape} labels{y.shape} weights{wts.shape}")
        if self.reg not in ("l2", "sigmoidal"):
            raise ValueError(f"unknown regularizer {self.reg!r}")
        if np.any(wts.sum(axis=2) <= 0):
            raise ValueError("every component needs at least one sample")
        object.__setattr__(self, "features", F)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "weights", wts)
        # both the logistic term and either regularizer are nonnegative
        object.__setattr__(self, "lower_bounds", np.zeros(F.shape[:2]))

    @property
    def kind(self):
        return "logistic_l2" if self.reg == "l2" else "logistic_sigmoidal"

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def m(self):
        return self.features.shape[1]

    @property
    def p(self):
        return self.features.shape[3]

    @property
    def max_sq_norm(self) -> float:
        sq = np.einsum("nmbp,nmbp->nmb", self.features, self.features)
        return float(np.max(np.where(self.weights > 0, sq, 0.0)))

    @property
    def mu(self):
        return float(self.rho) if self.reg == "l2" else 0.0

    @property
    def L(self):
        if self.reg == "l2":
            return self.max_sq_norm / 4.0 + self.rho
        return self.max_sq_norm / 4.0 + 0.5 * self.eta * SIGMOIDAL_CURVATURE

    def _reg_value(self, X):
        if self.reg == "l2":
            return 0.5 * self.rho * np.sum(X**2, axis=-1)
        return 0.5 * self.eta * np.sum(X**2 / (1.0 + X**2), axis=-1)

    def _reg_grad(self, X):
        if self.reg == "l2":
            return self.rho * X
        return self.eta * X / (1.0 + X**2) ** 2

    def agent_gradients(self, X, idx, agents=None):
        a = _agents(agents, len(idx))
        U = self.features[a, idx]
        v = self.labels[a, idx]
        margins = np.einsum("kbp,kp->kb", U, X) * v
        coef = -expit(-margins) * v * self.weights[a, idx]
        return np.einsum("kb,kbp->kp", coef, U) + self._reg_grad(X)

    def agent_values(self, X, idx, agents=None):
        a = _agents(agents, len(idx))
        margins = np.einsum("kbp,kp->kb", self.features[a, idx], X) * self.labels[a, idx]
        loss = np.sum(self.weights[a, idx] * np.logaddexp(0.0, -margins), axis=1)
        return loss + self._reg_value(X)

    def all_component_gradients(self, x):
        margins = np.einsum("nmbp,p->nmb", self.features, x) * self.labels
        coef = -expit(-margins) * self.labels * self.weights
        return np.einsum("nmb,nmbp->nmp", coef, self.features) + self._reg_grad(x)

    def all_component_values(self, x):
        margins = np.einsum("nmbp,p->nmb", self.features, x) * self.labels
        loss = np.sum(self.weights * np.logaddexp(0.0, -margins), axis=2)
        return loss + self._reg_value(x)


def make_quadratic(
    n: int,
    m: int,
    p: int,
    *,
    mu: float = 1.0,
    L: float = 4.0,
    heterogeneity: float = 1.0,
    spread: float = 1.0,
    seed: int = 0,
) -> QuadraticProblem:
    """Random heterogeneous quadratic family with spectra inside ``[mu, L]``.

    Component ``(i, l)`` has minimiser ``c_i + spread * z_il`` where the agent
    centre ``c_i`` is ``heterogeneity * z_i``. For ``p >= 2`` every component
    attains both ``mu`` and ``L`` so the problem constants are exact.
    """
    if not 0 < mu <= L:
        raise ValueError(f"need 0 < mu <= L, got mu={mu}, L={L}")
    rng = np.random.default_rng(seed)
    Q = np.empty((n, m, p, p))
    for i in range(n):
        for l in range(m):
            basis, _ = np.linalg.qr(rng.standard_normal((p, p)))
            lam = rng.uniform(mu, L, size=p)
            if p >= 2:
                lam[0], lam[1] = mu, L
            Q[i, l] = (basis * lam) @ basis.T
    Q = 0.5 * (Q + np.swapaxes(Q, -1, -2))
    centers = heterogeneity * rng.standard_normal((n, 1, p))
    minimisers = centers + spread * rng.standard_normal((n, m, p))
    b = np.einsum("nmpq,nmq->nmp", Q, minimisers)
    return QuadraticProblem(Q=Q, b=b)


def make_logistic(dataset, partition, *, reg: str = "l2", rho: float = 0.2, eta: float = 0.2) -> LogisticProblem:
    """Pack a partitioned dataset into padded ``(n, m, B, p)`` mini-batch arrays."""
    n, m = partition.n, partition.m
    batches = partition.batches
    bmax = max(len(batches[i][l]) for i in range(n) for l in range(m))
    p = dataset.features.shape[1]
    F = np.zeros((n, m, bmax, p))
    y = np.zeros((n, m, bmax))
    wts = np.zeros((n, m, bmax))
    for i in range(n):
        for l in range(m):
            rows = np.asarray(batches[i][l], dtype=int)
            k = len(rows)
            F[i, l, :k] = dataset.features[rows]
            y[i, l, :k] = dataset.labels[rows]
            wts[i, l, :k] = 1.0 / k
    return LogisticProblem(features=F, labels=y, weights=wts, reg=reg, rho=rho, eta=eta)


def component_gradient(prob: FiniteSumProblem, i: int, l: int, x) -> np.ndarray:
    return prob.component_gradient(i, l, np.asarray(x, float))


def full_gradient(prob: FiniteSumProblem, x) -> np.ndarray:
    return prob.full_gradient(np.asarray(x, float))


def estimate_L_mu(prob: FiniteSumProblem) -> dict[str, float]:
    """Smoothness and strong-convexity constants valid for every component."""
    return {"L": prob.L, "mu": prob.mu}


def constants(prob: FiniteSumProblem, f_bar: float | None = None) -> dict[str, float]:
    """``mu, L`` and the bounded-variance pair ``A = 2L``, ``B^2 = 2L (f_bar - mean lower bound)``.

    ``f_bar`` (the infimum of ``f``) defaults to the reference solver's value.
    """
    if f_bar is None:
        from drrlab.metrics import reference_solve

        f_bar = reference_solve(prob).f_star
    if not np.all(np.isfinite(prob.lower_bounds)):
        raise ValueError("component lower bounds unavailable (some component is unbounded below)")
    L = prob.L
    B2 = 2.0 * L * (f_bar - float(np.mean(prob.lower_bounds)))
    return {"mu": prob.mu, "L": L, "A": 2.0 * L, "B2": max(B2, 0.0), "f_bar": float(f_bar)}
