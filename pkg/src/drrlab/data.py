"""Binary classification data: synthetic generation, CSV ingestion, label-sorted partitioning."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "LabeledDataset",
    "Partition",
    "DataError",
    "synth_classification",
    "load_csv",
    "heterogeneous_partition",
]


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray  # (N, p)
    labels: np.ndarray  # (N,), entries in {-1, +1}

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise DataError(f"features{X.shape} and labels{y.shape} disagree")
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite feature values")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise DataError("labels must be -1 or +1")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Partition:
    """Sample-to-agent assignment with each agent's samples cut into ``m`` mini-batches."""

    assignment: tuple[int, ...]
    agent_indices: tuple[tuple[int, ...], ...]
    batches: tuple[tuple[tuple[int, ...], ...], ...]
    m: int

    @property
    def n(self) -> int:
        return len(self.agent_indices)

    def to_json(self) -> str:
        return json.dumps(
            {
                "n": self.n,
                "m": self.m,
                "assignment": list(self.assignment),
                "batches": [[list(b) for b in agent] for agent in self.batches],
            }
        )


def synth_classification(n_samples: int, p: int, separation: float, seed: int) -> LabeledDataset:
    """Two unit-covariance Gaussian clusters centred at ``+-separation * e_1``."""
    if n_samples < 2 or p < 1:
        raise DataError(f"need n_samples >= 2 and p >= 1, got {n_samples}, {p}")
    rng = np.random.default_rng(seed)
    labels = np.where(rng.random(n_samples) < 0.5, -1.0, 1.0)
    X = rng.standard_normal((n_samples, p))
    X[:, 0] += separation * labels
    return LabeledDataset(X, labels)


def load_csv(path: str | Path) -> LabeledDataset:
    """Read ``label,feat1,...,featp`` rows. Labels 0/1 are mapped to -1/+1."""
    path = Path(path)
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    feats, labels = [], []
    width = None
    with handle:
        for lineno, row in enumerate(csv.reader(handle), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: unparseable value ({exc})") from exc
            if len(vals) < 2:
                raise DataError(f"{path}:{lineno}: need a label and at least one feature")
            lab = vals[0]
            if lab == 0.0:
                lab = -1.0
            if lab not in (-1.0, 1.0):
                raise DataError(f"{path}:{lineno}: label {row[0]!r} not in {{-1, 0, 1}}")
            if width is None:
                width = len(vals) - 1
            elif len(vals) - 1 != width:
                raise DataError(f"{path}:{lineno}: expected {width} features, found {len(vals) - 1}")
            labels.append(lab)
            feats.append(vals[1:])
    if not feats:
        raise DataError(f"{path}: no data rows")
    return LabeledDataset(np.array(feats), np.array(labels))


def _split_sizes(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if k < extra else 0) for k in range(parts)]


def heterogeneous_partition(ds: LabeledDataset, n: int, m: int) -> Partition:
    """Stable sort by label, then cut into ``n`` contiguous blocks and each block into ``m`` mini-batches."""
    N = len(ds)
    if n < 1 or m < 1:
        raise DataError(f"n and m must be positive, got {n}, {m}")
    if N < n * m:
        raise DataError(f"{N} samples cannot fill {n} agents x {m} mini-batches")
    order = np.argsort(ds.labels, kind="stable")
    assignment = [0] * N
    agents, batches = [], []
    start = 0
    for i, size in enumerate(_split_sizes(N, n)):
        block = [int(k) for k in order[start : start + size]]
        start += size
        for k in block:
            assignment[k] = i
        agents.append(tuple(block))
        cuts, pos = [], 0
        for bsize in _split_sizes(size, m):
            cuts.append(tuple(block[pos : pos + bsize]))
            pos += bsize
        batches.append(tuple(cuts))
    return Partition(tuple(assignment), tuple(agents), tuple(batches), m)
