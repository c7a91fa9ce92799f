"""Communication graphs and Metropolis mixing matrices.

Graphs are undirected, 0-indexed and immutable. ``metropolis_weights`` turns a
connected graph into a symmetric doubly stochastic mixing matrix and caches
its contraction factor ``rho_w = ||W - (1/n) 11^T||_2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

__all__ = [
    "Graph",
    "MixingMatrix",
    "GraphError",
    "build_graph",
    "metropolis_weights",
    "spectral_gap",
    "TOPOLOGIES",
]

TOPOLOGIES = ("complete", "ring", "grid", "exponential", "erdos_renyi")

ER_MAX_RETRIES = 100


class GraphError(ValueError):
    """Invalid topology request or a graph that violates connectivity."""


@dataclass(frozen=True)
class Graph:
    n: int
    edges: frozenset[tuple[int, int]]
    name: str = "custom"

    def __post_init__(self) -> None:
        if self.n < 1:
            raise GraphError(f"graph needs at least one node, got n={self.n}")
        for i, j in self.edges:
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise GraphError(f"edge ({i}, {j}) out of range for n={self.n}")

    @classmethod
    def from_pairs(cls, n: int, pairs, name: str = "custom") -> Graph:
        """Build a graph from any iterable of pairs; duplicates and orientation are normalised."""
        edges = set()
        for i, j in pairs:
            i, j = int(i), int(j)
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            edges.add((min(i, j), max(i, j)))
        return cls(n=n, edges=frozenset(edges), name=name)

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return g

    @property
    def connected(self) -> bool:
        return nx.is_connected(self.to_networkx())

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def neighbors(self, i: int) -> list[int]:
        out = [b if a == i else a for a, b in self.edges if i in (a, b)]
        return sorted(out)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    # Edge-list text format: first line "n", then one "i j" pair per line.
    def to_edgelist(self) -> str:
        lines = [str(self.n)] + [f"{i} {j}" for i, j in sorted(self.edges)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edgelist(cls, text: str, name: str = "edgelist") -> Graph:
        rows = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        if not rows:
            raise GraphError("empty edge list")
        try:
            n = int(rows[0])
        except ValueError as exc:
            raise GraphError(f"line 1: expected node count, got {rows[0]!r}") from exc
        pairs = []
        for lineno, row in enumerate(rows[1:], start=2):
            parts = row.split()
            if len(parts) != 2:
                raise GraphError(f"line {lineno}: expected 'i j', got {row!r}")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise GraphError(f"line {lineno}: non-integer node id in {row!r}") from exc
        return cls.from_pairs(n, pairs, name=name)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_edgelist())

    @classmethod
    def load(cls, path: str | Path) -> Graph:
        return cls.from_edgelist(Path(path).read_text(), name=Path(path).stem)


def _grid_edges(rows: int, cols: int):
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                yield k, k + 1
            if r + 1 < rows:
                yield k, k + cols


def _exponential_edges(n: int):
    k = 1
    while k < n:
        for i in range(n):
            j = (i + k) % n
            if j != i:
                yield i, j
        k *= 2


def build_graph(
    kind: str,
    n: int,
    *,
    rows: int | None = None,
    cols: int | None = None,
    prob: float = 0.8,
    seed: int = 0,
) -> Graph:
    """Construct one of the named topologies on ``n`` agents.

    ``grid`` is the 2D lattice without wraparound and needs ``rows * cols == n``;
    when neither is given a square ``n`` is assumed. ``exponential`` links node
    ``i`` to ``(i +- 2^k) mod n`` for every ``2^k < n``. ``erdos_renyi`` redraws
    from successive sub-seeds until the sample is connected.
    """
    if n < 1:
        raise GraphError(f"n must be >= 1, got {n}")
    if kind == "complete":
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        return Graph.from_pairs(n, pairs, name="complete")
    if kind == "ring":
        pairs = [(i, (i + 1) % n) for i in range(n)] if n > 1 else []
        return Graph.from_pairs(n, [p for p in pairs if p[0] != p[1]], name="ring")
    if kind == "grid":
        if rows is None and cols is None:
            side = int(round(np.sqrt(n)))
            if side * side != n:
                raise GraphError(f"grid with n={n} needs rows and cols (n is not a perfect square)")
            rows = cols = side
        elif rows is None:
            rows = n // cols if cols else 0
        elif cols is None:
            cols = n // rows if rows else 0
        if rows * cols != n:
            raise GraphError(f"grid dimensions {rows}x{cols} do not match n={n}")
        return Graph.from_pairs(n, _grid_edges(rows, cols), name=f"grid{rows}x{cols}")
    if kind == "exponential":
        return Graph.from_pairs(n, _exponential_edges(n), name="exponential")
    if kind == "erdos_renyi":
        if not 0.0 < prob <= 1.0:
            raise GraphError(f"edge probability must lie in (0, 1], got {prob}")
        ss = np.random.SeedSequence(seed)
        for child in ss.spawn(ER_MAX_RETRIES):
            sub = int(child.generate_state(1)[0])
            g = nx.gnp_random_graph(n, prob, seed=sub)
            graph = Graph.from_pairs(n, g.edges(), name="erdos_renyi")
            if graph.connected:
                return graph
        raise GraphError(f"Erdos-Renyi graph (n={n}, p={prob}) still disconnected after {ER_MAX_RETRIES} draws")
    raise GraphError(f"unknown topology {kind!r}; expected one of {', '.join(TOPOLOGIES)}")


@dataclass(frozen=True)
class MixingMatrix:
    w: np.ndarray
    rho_w: float
    graph: Graph | None = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def mix(self, x: np.ndarray) -> np.ndarray:
        """One gossip round on the stacked ``n x p`` state."""
        return self.w @ x


def spectral_gap(w) -> float:
    """Spectral norm of ``W - (1/n) 11^T`` via a symmetric eigendecomposition."""
    mat = w.w if isinstance(w, MixingMatrix) else np.asarray(w, dtype=float)
    n = mat.shape[0]
    if n == 1:
        return 0.0
    centered = mat - np.full((n, n), 1.0 / n)
    centered = 0.5 * (centered + centered.T)
    eig = np.linalg.eigvalsh(centered)
    return float(np.max(np.abs(eig)))


def metropolis_weights(g: Graph) -> MixingMatrix:
    """Metropolis-Hastings weights ``1 / (1 + max(deg_i, deg_j))`` on every edge."""
    if not g.connected:
        raise GraphError(f"graph {g.name!r} on {g.n} nodes is disconnected")
    deg = g.degrees()
    w = np.zeros((g.n, g.n))
    for i, j in sorted(g.edges):
        v = 1.0 / (1.0 + max(deg[i], deg[j]))
        w[i, j] = v
        w[j, i] = v
    # Row sums are accumulated in sorted column order so the result is reproducible bit for bit.
    for i in range(g.n):
        w[i, i] = 1.0 - np.sum(w[i])
    return MixingMatrix(w=w, rho_w=spectral_gap(w), graph=g)
