import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geotkg.config import FeatureConfig
from geotkg.errors import DataFormatError, DomainError, EmptySupport
from geotkg.graphstore import (
    TemporalKG,
    candidate_set,
    distance_matrix,
    feature_matrix,
    graph_distance,
    load_tsv,
    pair_distribution,
    path_count_matrix,
    save_tsv,
    structural_feature,
)


def random_kg(seed, n=8, n_rel=2, n_bins=5, n_events=20):
    rng = np.random.default_rng(seed)
    q = np.column_stack([
        rng.integers(0, n, n_events),
        rng.integers(0, n_rel, n_events),
        rng.integers(0, n, n_events),
        rng.integers(0, n_bins, n_events),
    ])
    widths = {u: float(rng.uniform(0.5, 2.0)) for u in range(n_bins)}
    return TemporalKG(n, n_rel, q, widths)


def floyd_warshall(kg, u):
    n = kg.n_entities
    D = np.full((n, n), np.inf)
    np.fill_diagonal(D, 0)
    for h, _, t, b in kg.quadruples:
        if b <= u and h != t:
            D[h, t] = D[t, h] = 1
    for k in range(n):
        D = np.minimum(D, D[:, [k]] + D[[k], :])
    return D


def test_path_counts_with_self_loops():
    kg = TemporalKG(4, 1, [[0, 0, 0, 0], [0, 0, 1, 0], [1, 0, 2, 0], [2, 0, 3, 0], [3, 0, 0, 0]])
    for max_len in (3, 4):
        cfg = FeatureConfig(window=0, max_path_len=max_len)
        np.testing.assert_array_equal(path_count_matrix(kg, 0, cfg), brute_simple_paths(kg, 0, cfg))


def brute_simple_paths(kg, u, cfg):
    n = kg.n_entities
    adj = set()
    for h, _, t, b in kg.quadruples:
        if u - cfg.window <= b <= u and h != t:
            adj |= {(h, t), (t, h)}
    C = np.zeros((n, n))
    for length in range(1, cfg.max_path_len + 1):
        for seq in itertools.permutations(range(n), length + 1):
            if all((seq[i], seq[i + 1]) in adj for i in range(length)):
                C[seq[0], seq[-1]] += 1
    return C


def test_canonical_storage():
    kg = TemporalKG(3, 1, [[2, 0, 1, 1], [0, 0, 1, 0], [0, 0, 1, 0]])
    assert len(kg) == 2
    assert kg.quadruples[0].tolist() == [0, 0, 1, 0]
    assert kg.width(0) == 1.0
    with pytest.raises(ValueError):
        kg.quadruples[0, 0] = 5
    with pytest.raises(DomainError):
        TemporalKG(2, 1, [[0, 0, 2, 0]])
    with pytest.raises(DomainError):
        TemporalKG(3, 1, [[0, 1, 2, 0]])
    with pytest.raises(DomainError):
        TemporalKG(3, 1, [[0, 0, 2, 0]], {0: 0.0})


def test_tsv_roundtrip(tmp_path):
    kg = random_kg(0)
    path = tmp_path / "kg.tsv"
    save_tsv(kg, path)
    assert load_tsv(path, kg.n_entities, kg.n_relations) == kg


def test_tsv_errors(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("0\t0\t1\n")
    with pytest.raises(DataFormatError):
        load_tsv(path)
    path.write_text("0\t0\tx\t1\n")
    with pytest.raises(DataFormatError):
        load_tsv(path)
    path.write_text("0\t0\t-1\t1\n")
    with pytest.raises(DataFormatError):
        load_tsv(path)
    path.write_text("# comment\n0\t0\t1\t3\n")
    kg = load_tsv(path)
    assert (kg.n_entities, kg.n_relations, kg.width(3)) == (2, 1, 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_distances_match_floyd_warshall(seed):
    kg = random_kg(seed)
    for u in range(5):
        D = distance_matrix(kg, u)
        np.testing.assert_array_equal(D, floyd_warshall(kg, u))
        for h, t in [(0, 1), (2, 5), (3, 3)]:
            g = graph_distance(kg, h, t, u)
            assert (g is None and np.isinf(D[h, t])) or g == D[h, t]


@pytest.mark.parametrize("seed", range(5))
def test_distance_properties(seed):
    kg = random_kg(seed)
    prev = None
    for u in range(5):
        D = distance_matrix(kg, u)
        np.testing.assert_array_equal(D, D.T)
        n = kg.n_entities
        for a, b, c in itertools.product(range(n), repeat=3):
            assert D[a, c] <= D[a, b] + D[b, c]
        if prev is not None:
            assert np.all(D <= prev)
        prev = D


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("max_len", [1, 2, 3, 4])
def test_path_counts_match_brute_force(seed, max_len):
    kg = random_kg(seed, n=6, n_events=14)
    cfg = FeatureConfig(window=2, max_path_len=max_len)
    for u in range(5):
        np.testing.assert_array_equal(path_count_matrix(kg, u, cfg), brute_simple_paths(kg, u, cfg))


def test_feature_bounded_and_causal():
    kg = random_kg(1, n=8, n_events=60)
    cfg = FeatureConfig(window=5, max_path_len=3, S_max=1.5)
    S = feature_matrix(kg, 2, cfg)
    assert np.all((S >= 0) & (S <= 1.5))
    assert S.max() == 1.5
    future = TemporalKG(kg.n_entities, kg.n_relations, np.vstack([kg.quadruples, [[0, 0, 7, 4], [1, 1, 6, 3]]]), kg.widths)
    np.testing.assert_array_equal(feature_matrix(future, 2, cfg), S)
    assert structural_feature(kg, 0, 1, 3, 2, cfg) == S[0, 3]


def test_pair_distribution():
    kg = random_kg(2, n_events=40)
    prev = None
    for u in range(5):
        try:
            dist = pair_distribution(kg, 0, u)
        except EmptySupport:
            continue
        assert abs(sum(dist.values()) - 1) <= 1e-12
        assert all(p > 0 for p in dist.values())
        if prev is not None and len(kg.events(r=0, u=u)) == 0:
            assert dist == prev
        prev = dist
    with pytest.raises(EmptySupport):
        pair_distribution(TemporalKG(3, 2, [[0, 0, 1, 0]]), 1, 0)
    with pytest.raises(DomainError):
        pair_distribution(kg, 5, 0)


def test_candidate_set():
    kg = random_kg(3, n=10, n_events=30)
    h, r, _, u = kg.quadruples[0]
    c = candidate_set(kg, h, r, u, 5, seed=1)
    assert len(c) == 5 and len(np.unique(c)) == 5
    assert set(kg.positives(h, r, u)) <= set(c)
    np.testing.assert_array_equal(c, candidate_set(kg, h, r, u, 5, seed=1))
    np.testing.assert_array_equal(candidate_set(kg, h, r, u, 10), np.arange(10))
    with pytest.raises(DomainError):
        candidate_set(kg, h, r, u, 11)


def test_restrict():
    kg = random_kg(4)
    lo, hi = kg.restrict(max_bin=2), kg.restrict(min_bin=3)
    assert len(lo) + len(hi) == len(kg)
    assert max(lo.widths) <= 2 and min(hi.widths) >= 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_distance_symmetry_property(seed):
    kg = random_kg(seed, n=7, n_events=10)
    D = distance_matrix(kg, 4)
    assert np.array_equal(D, D.T)
    assert np.all(np.diag(D) == 0)
