from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drrlab.data import DataError, LabeledDataset, heterogeneous_partition, load_csv, synth_classification
from drrlab.metrics import reference_solve
from drrlab.objectives import make_logistic


def test_synth_is_deterministic():
    a = synth_classification(50, 3, 2.0, 11)
    b = synth_classification(50, 3, 2.0, 11)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)


def test_synth_zero_separation_has_matching_class_means():
    ds = synth_classification(20_000, 2, 0.0, 0)
    pos = ds.features[ds.labels > 0].mean(axis=0)
    neg = ds.features[ds.labels < 0].mean(axis=0)
    assert np.all(np.abs(pos - neg) < 0.06)


def test_synth_well_separated_is_learnable():
    ds = synth_classification(200, 2, 10.0, 0)
    part = heterogeneous_partition(ds, 1, 1)
    prob = make_logistic(ds, part, reg="l2", rho=0.01)
    x = reference_solve(prob, tol=1e-9).x_star
    acc = np.mean(np.sign(ds.features @ x) == ds.labels)
    assert acc >= 0.99


def test_synth_rejects_bad_sizes():
    with pytest.raises(DataError):
        synth_classification(1, 2, 1.0, 0)


def test_dataset_validation():
    with pytest.raises(DataError, match="labels"):
        LabeledDataset(np.zeros((2, 1)), np.array([1.0, 2.0]))
    with pytest.raises(DataError, match="non-finite"):
        LabeledDataset(np.array([[np.nan]]), np.array([1.0]))


def test_load_csv_single_row(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("1,0.5,0.25\n")
    ds = load_csv(path)
    assert len(ds) == 1 and ds.p == 2
    np.testing.assert_array_equal(ds.features, [[0.5, 0.25]])


def test_load_csv_remaps_zero_label(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("0,1.0\n1,2.0\n\n-1,3.0\n")
    assert load_csv(path).labels.tolist() == [-1.0, 1.0, -1.0]


def test_load_csv_dimension_error_names_line(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("1,0.1,0.2\n-1,0.3,0.4\n1,0.5,0.6,0.7\n")
    with pytest.raises(DataError, match=r"d\.csv:3"):
        load_csv(path)


def test_load_csv_parse_errors(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("1,abc\n")
    with pytest.raises(DataError, match=":1"):
        load_csv(path)
    path.write_text("2,1.0\n")
    with pytest.raises(DataError, match="label"):
        load_csv(path)
    with pytest.raises(DataError, match="cannot open"):
        load_csv(tmp_path / "missing.csv")


def test_partition_four_samples_two_agents():
    ds = LabeledDataset(np.arange(4.0)[:, None], np.array([1.0, -1.0, 1.0, -1.0]))
    part = heterogeneous_partition(ds, 2, 1)
    assert part.agent_indices == ((1, 3), (0, 2))
    assert [ds.labels[list(a)].tolist() for a in part.agent_indices] == [[-1.0, -1.0], [1.0, 1.0]]


def test_partition_single_agent():
    ds = synth_classification(30, 2, 1.0, 0)
    part = heterogeneous_partition(ds, 1, 7)
    assert sorted(part.agent_indices[0]) == list(range(30))
    assert len(part.batches[0]) == 7


def test_partition_sixty_forty_split():
    labels = np.array([-1.0] * 60 + [1.0] * 40)
    rng = np.random.default_rng(0)
    ds = LabeledDataset(rng.standard_normal((100, 2)), rng.permutation(labels))
    part = heterogeneous_partition(ds, 4, 5)
    signs = [set(ds.labels[list(a)].tolist()) for a in part.agent_indices]
    assert signs == [{-1.0}, {-1.0}, {-1.0, 1.0}, {1.0}]


def test_partition_too_few_samples():
    ds = synth_classification(10, 2, 1.0, 0)
    with pytest.raises(DataError, match="cannot fill"):
        heterogeneous_partition(ds, 3, 4)


def test_partition_json_round_trip():
    ds = synth_classification(12, 2, 1.0, 0)
    part = heterogeneous_partition(ds, 2, 3)
    blob = json.loads(part.to_json())
    assert blob["n"] == 2 and blob["m"] == 3
    assert blob["assignment"] == list(part.assignment)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 40), st.integers(0, 1000))
def test_partition_is_balanced_bijection(n, m, extra, seed):
    N = n * m + extra
    rng = np.random.default_rng(seed)
    labels = np.where(rng.random(N) < 0.5, -1.0, 1.0)
    ds = LabeledDataset(rng.standard_normal((N, 2)), labels)
    part = heterogeneous_partition(ds, n, m)
    slots = [k for agent in part.batches for batch in agent for k in batch]
    assert sorted(slots) == list(range(N))
    sizes = [len(a) for a in part.agent_indices]
    assert max(sizes) - min(sizes) <= 1
    for i, agent in enumerate(part.batches):
        bs = [len(b) for b in agent]
        assert max(bs) - min(bs) <= 1 and min(bs) >= 1
        for b in agent:
            assert all(part.assignment[k] == i for k in b)
    # stable sort: concatenated blocks are the stable label order
    order = [k for a in part.agent_indices for k in a]
    assert order == np.argsort(labels, kind="stable").tolist()
