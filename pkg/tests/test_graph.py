import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selmag.graph import (DatasetError, DomainSet, Graph, canonical_edges, load_domain_set,
                          normalize_adjacency, save_domain_set, split_labels, standardize_features)


def test_two_node_clique():
    assert np.allclose(normalize_adjacency([(0, 1)], 2), [[0.5, 0.5], [0.5, 0.5]])


def test_single_node():
    assert np.array_equal(normalize_adjacency([], 1), [[1.0]])


def test_path_graph_by_hand():
    a = normalize_adjacency([(0, 1), (1, 2)], 3)
    d = np.array([2.0, 3.0, 2.0])
    expect = np.array([[1 / 2, 1 / np.sqrt(6), 0],
                       [1 / np.sqrt(6), 1 / 3, 1 / np.sqrt(6)],
                       [0, 1 / np.sqrt(6), 1 / 2]])
    assert np.allclose(a, expect, atol=1e-15)
    assert np.allclose(np.diag(a), 1 / d)


def test_out_of_range_edge():
    with pytest.raises(DatasetError):
        normalize_adjacency([(0, 3)], 3)


edge_lists = st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), max_size=30)


@settings(max_examples=50, deadline=None)
@given(edges=edge_lists, seed=st.integers(0, 1000))
def test_adjacency_symmetric_and_order_invariant(edges, seed):
    a = normalize_adjacency(edges, 8)
    assert np.abs(a - a.T).max() < 1e-12
    assert (np.diag(a) > 0).all()
    assert np.isfinite(a.sum(axis=1)).all() and (a.sum(axis=1) > 0).all()
    rng = np.random.default_rng(seed)
    shuffled = [edges[i][::-1] if rng.random() < 0.5 else edges[i] for i in rng.permutation(len(edges))]
    doubled = shuffled + shuffled[: len(shuffled) // 2]
    assert np.array_equal(normalize_adjacency(doubled, 8), a)


def test_self_and_duplicate_edges_dropped():
    assert canonical_edges([(1, 1), (2, 0), (0, 2)], 3).tolist() == [[0, 2]]


def fixture_set(n=4, d=3, r=2):
    rng = np.random.default_rng(0)
    def g(labels=True):
        return Graph(n, [(0, 1), (1, 2), (2, 3)], rng.normal(size=(n, d)),
                     rng.integers(r, size=n) if labels else None)
    return DomainSet([g(), g()], g(False), r, d)


def test_round_trip_bit_identical(tmp_path):
    ds = fixture_set()
    save_domain_set(ds, tmp_path / "a")
    back = load_domain_set(tmp_path / "a")
    assert back.num_sources == 2 and back.num_classes == 2 and back.feature_dim == 3
    for g0, g1 in zip([*ds.sources, ds.target], [*back.sources, back.target]):
        assert np.array_equal(g0.features, g1.features)
        assert np.array_equal(g0.edges, g1.edges)
        assert np.array_equal(g0.norm_adj, g1.norm_adj)
    assert back.target.labels is None
    for g0, g1 in zip(ds.sources, back.sources):
        assert np.array_equal(g0.labels, g1.labels)
    save_domain_set(back, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*.*")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_feature_row_mismatch(tmp_path):
    save_domain_set(fixture_set(), tmp_path)
    p = tmp_path / "source_0" / "features.tsv"
    p.write_text("\n".join(p.read_text().splitlines()[:-1]) + "\n")
    with pytest.raises(DatasetError):
        load_domain_set(tmp_path)


def test_label_out_of_vocabulary(tmp_path):
    save_domain_set(fixture_set(), tmp_path)
    (tmp_path / "source_1" / "labels.tsv").write_text("0\t0\n1\t5\n2\t0\n3\t1\n")
    with pytest.raises(DatasetError):
        load_domain_set(tmp_path)


def test_missing_file(tmp_path):
    save_domain_set(fixture_set(), tmp_path)
    (tmp_path / "target" / "edges.tsv").unlink()
    with pytest.raises(DatasetError):
        load_domain_set(tmp_path)
    with pytest.raises(DatasetError):
        load_domain_set(tmp_path / "nowhere")


def test_graph_validation():
    with pytest.raises(DatasetError):
        Graph(3, [], np.zeros((2, 2)))
    with pytest.raises(DatasetError):
        Graph(3, [], np.array([[np.inf, 0], [0, 0], [0, 0]]))
    g = Graph(3, [(0, 1)], np.zeros((3, 2)))
    assert not g.labeled_mask.any()


def labeled(n):
    return Graph(n, [], np.zeros((n, 1)), np.zeros(n, dtype=int))


def test_split_labels_counts():
    assert split_labels(labeled(7), 1.0, 0).labeled_mask.all()
    assert split_labels(labeled(100), 0.1, 0).labeled_mask.sum() == 10
    assert split_labels(labeled(15), 0.1, 0).labeled_mask.sum() == 2


def test_split_labels_deterministic_and_varies():
    g = labeled(100)
    a, b = split_labels(g, 0.1, 3), split_labels(g, 0.1, 3)
    assert np.array_equal(a.labeled_mask, b.labeled_mask)
    masks = {tuple(split_labels(g, 0.1, s).labeled_mask) for s in range(5)}
    assert len(masks) > 1


def test_split_labels_errors():
    with pytest.raises(DatasetError):
        split_labels(Graph(3, [], np.zeros((3, 1))), 0.5, 0)
    with pytest.raises(ValueError):
        split_labels(labeled(3), 0.0, 0)


def test_standardize_uses_source_statistics():
    ds = fixture_set()
    out = standardize_features(ds)
    pooled = np.vstack([g.features for g in out.sources])
    assert np.allclose(pooled.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(pooled.std(axis=0), 1.0)


def test_domain_set_validation():
    g = Graph(2, [], np.zeros((2, 3)), [0, 1])
    with pytest.raises(DatasetError):
        DomainSet([], g, 2)
    with pytest.raises(DatasetError):
        DomainSet([g], Graph(2, [], np.zeros((2, 4))), 2)
    with pytest.raises(DatasetError):
        DomainSet([g], g, 1)
