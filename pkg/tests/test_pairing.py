import csv
import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import brute_force_pairs, random_batch
from pcnet.ops import ConfigurationError
from pcnet.pairing import (METRICS, STRATEGIES, BatchSpec, PairingError, cosine_distance, distance_matrix,
                           euclidean_distance, sample_batch, select_pairs, write_pairs_csv)
from pcnet.tensor import DimensionError


def test_batchspec_bounds():
    assert BatchSpec().size == 180
    with pytest.raises(ConfigurationError):
        BatchSpec(1, 6)
    with pytest.raises(ConfigurationError):
        BatchSpec(30, 1)


def test_sample_batch_exhaustive():
    labels = np.array([0, 0, 1, 1])
    idx = sample_batch(labels, BatchSpec(2, 2), np.random.default_rng(0))
    assert sorted(idx.tolist()) == [0, 1, 2, 3]


def test_sample_batch_geometry():
    labels = np.repeat(np.arange(45), 10)
    idx = sample_batch(labels, BatchSpec(30, 6), np.random.default_rng(0))
    assert len(idx) == 180
    values, counts = np.unique(labels[idx], return_counts=True)
    assert len(values) == 30 and set(counts) == {6}
    assert len(set(idx.tolist())) == 180
    # grouped by class
    assert all(len(set(labels[idx[i:i + 6]])) == 1 for i in range(0, 180, 6))


def test_sample_batch_deterministic():
    labels = np.repeat(np.arange(5), 8)
    a = sample_batch(labels, BatchSpec(3, 4), np.random.default_rng(9))
    b = sample_batch(labels, BatchSpec(3, 4), np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_sample_batch_too_few_classes():
    with pytest.raises(ConfigurationError):
        sample_batch(np.array([0, 0, 1, 1]), BatchSpec(3, 2), np.random.default_rng(0))


def test_sample_batch_small_class_warns(caplog):
    labels = np.array([0, 0, 0, 1, 1, 1, 1, 1])
    with caplog.at_level(logging.WARNING, logger="pcnet.pairing"):
        idx = sample_batch(labels, BatchSpec(2, 4), np.random.default_rng(0))
    assert "with replacement" in caplog.text
    assert np.bincount(labels[idx]).tolist() == [4, 4]


def test_euclidean_examples(rng):
    assert euclidean_distance([1, 2], [1, 2]) == 0
    assert euclidean_distance([0, 0], [3, 4]) == 5
    u, v = rng.normal(size=64), rng.normal(size=64)
    assert euclidean_distance(u, v) == pytest.approx(math.sqrt(math.fsum((u - v) ** 2)), rel=1e-14)
    with pytest.raises(DimensionError):
        euclidean_distance([1, 2], [1, 2, 3])


def test_cosine_examples(rng):
    assert cosine_distance([2, 1], [2, 1]) == pytest.approx(0, abs=1e-15)
    assert cosine_distance([1, 0], [0, 1]) == 1
    u, v = rng.normal(size=8), rng.normal(size=8)
    assert cosine_distance(u, v) == pytest.approx(1 - u @ v / (np.linalg.norm(u) * np.linalg.norm(v)), rel=1e-14)
    with pytest.raises(ValueError):
        cosine_distance([0, 0], [1, 0])


def test_distance_matrix_agrees_with_pairwise(rng):
    F = rng.normal(size=(6, 4))
    D = distance_matrix(F, "euclidean")
    C = distance_matrix(F, "cosine")
    for i in range(6):
        for j in range(6):
            assert D[i, j] == pytest.approx(euclidean_distance(F[i], F[j]), rel=1e-12, abs=1e-12)
            assert C[i, j] == pytest.approx(cosine_distance(F[i], F[j]), rel=1e-12, abs=1e-12)
    with pytest.raises(ValueError):
        distance_matrix(np.zeros((2, 2)), "cosine")
    with pytest.raises(ConfigurationError):
        distance_matrix(F, "manhattan")


def test_select_pairs_worked_example():
    F = [(0, 0), (0, 1), (5, 5), (5, 6)]
    a = select_pairs(F, ["a", "a", "b", "b"], "euclidean", "SS")
    assert a.intra[0] == 1 and a.intra_dist[0] == 1.0
    assert a.inter[0] == 2 and a.inter_dist[0] == math.sqrt(50)


def test_select_pairs_tie_goes_to_lower_index():
    F = [(0, 0), (1, 1), (1, 1), (9, 9), (9, 9)]
    a = select_pairs(F, [0, 0, 0, 1, 1], "euclidean", "SS")
    assert a.intra[0] == 1
    assert a.inter[0] == 3


def test_sd_takes_farthest():
    F = [(0,), (1,), (4,), (10,), (11,)]
    a = select_pairs(F, [0, 0, 0, 1, 1], "euclidean", "SD")
    assert a.intra.tolist()[:3] == [2, 2, 0]


def test_select_pairs_rejects_singletons():
    with pytest.raises(PairingError, match="label 2"):
        select_pairs(np.zeros((5, 2)), [0, 0, 1, 1, 2])
    with pytest.raises(PairingError):
        select_pairs(np.zeros((3, 2)), [0, 0, 0])


def test_select_pairs_shape_checks():
    with pytest.raises(DimensionError):
        select_pairs(np.zeros((3, 2)), [0, 0, 1, 1])
    with pytest.raises(ConfigurationError):
        select_pairs(np.zeros((4, 2)), [0, 0, 1, 1], strategy="DD")
    with pytest.raises(ConfigurationError):
        select_pairs(np.zeros((4, 2)), [0, 0, 1, 1], strategy="RandomRandom")


def test_random_strategy_reproducible():
    rng = np.random.default_rng(0)
    F, labels = random_batch(rng)
    a = select_pairs(F, labels, "euclidean", "RandomRandom", np.random.default_rng(4))
    b = select_pairs(F, labels, "euclidean", "RandomRandom", np.random.default_rng(4))
    np.testing.assert_array_equal(a.intra, b.intra)
    np.testing.assert_array_equal(a.inter, b.inter)


@pytest.mark.parametrize("metric", METRICS)
@pytest.mark.parametrize("strategy", STRATEGIES)
def test_matches_brute_force(metric, strategy):
    for seed in range(40):
        rng = np.random.default_rng([seed, 17])
        F, labels = random_batch(rng, integer=seed % 2 == 0)
        got = select_pairs(F, labels, metric, strategy, np.random.default_rng(seed))
        intra, inter, di, de = brute_force_pairs(F, labels, metric, strategy, np.random.default_rng(seed))
        assert got.intra.tolist() == intra and got.inter.tolist() == inter
        np.testing.assert_allclose(got.intra_dist, di, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(got.inter_dist, de, rtol=1e-12, atol=1e-12)


@given(st.integers(0, 10_000), st.sampled_from(METRICS), st.sampled_from(STRATEGIES))
def test_label_constraints(seed, metric, strategy):
    rng = np.random.default_rng(seed)
    F, labels = random_batch(rng)
    labels = np.asarray(labels)
    a = select_pairs(F, labels, metric, strategy, rng)
    anchors = np.arange(len(labels))
    assert np.all(a.intra != anchors)
    assert np.all(labels[a.intra] == labels)
    assert np.all(labels[a.inter] != labels)
    if metric == "euclidean":
        np.testing.assert_allclose(a.intra_dist, np.linalg.norm(F - F[a.intra], axis=1), rtol=1e-12)


def test_pair_modes():
    a = select_pairs([(0,), (1,), (5,), (6,)], [0, 0, 1, 1])
    first, second = a.pairs("both")
    assert first.tolist() == [0, 0, 1, 1, 2, 2, 3, 3]
    assert second.tolist() == [1, 2, 0, 2, 3, 1, 2, 1]
    first, second = a.pairs("inter")
    assert first.tolist() == [0, 1, 2, 3] and second.tolist() == [2, 2, 1, 1]
    with pytest.raises(ConfigurationError):
        a.pairs("intra")


def test_write_pairs_csv(tmp_path):
    a = select_pairs([(0, 0), (0, 1), (5, 5), (5, 6)], [0, 0, 1, 1])
    path = tmp_path / "pairs.csv"
    write_pairs_csv(a, path, ids=[10, 11, 20, 21])
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["anchor_id", "intra_id", "intra_dist", "inter_id", "inter_dist"]
    assert rows[0]["anchor_id"] == "10" and rows[0]["intra_id"] == "11" and rows[0]["inter_id"] == "20"
    assert float(rows[0]["inter_dist"]) == math.sqrt(50)
