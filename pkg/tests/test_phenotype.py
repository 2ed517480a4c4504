import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse.csgraph import connected_components

from oracles import best_modularity, brute_knn_sets, modularity_pairs, set_partitions
from prl.errors import PreconditionError, ValidationError
from prl.ingest import EmbeddingMatrix
from prl.phenotype import (
    ARTIFACT,
    ArtifactRule,
    ClusterModel,
    Partition,
    assign_clusters,
    build_knn_graph,
    cluster_embeddings,
    cluster_purity,
    graph_from_edges,
    is_connected_partition,
    knn_search,
    leiden,
    modularity,
    subsample_vectors,
    two_pass_cluster,
)
from prl.phenotype.clustering import embedding_from_array


def _cliques(sizes, bridges=()):
    edges, start = [], 0
    for s in sizes:
        edges += [(start + i, start + j) for i in range(s) for j in range(i + 1, s)]
        start += s
    return graph_from_edges(start, edges + list(bridges))


def _random_graph(rng, n, p):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return graph_from_edges(n, edges)


def test_set_partition_oracle_counts():
    # Bell numbers
    assert [sum(1 for _ in set_partitions(n)) for n in range(1, 8)] == [1, 2, 5, 15, 52, 203, 877]


# -- kNN -------------------------------------------------------------------


def test_collinear_points():
    G = build_knn_graph(np.array([[0.0], [1.0], [2.5]]), K=1)
    assert set(G.neighbors(1)) == {0, 2}


def test_complete_graph_when_k_is_n_minus_1(rng):
    G = build_knn_graph(rng.normal(size=(7, 3)), K=6)
    A = G.adjacency.toarray()
    np.testing.assert_array_equal(A, 1 - np.eye(7))


def test_knn_errors(rng):
    X = rng.normal(size=(5, 2))
    with pytest.raises(PreconditionError):
        build_knn_graph(X, K=5)
    with pytest.raises(ValidationError):
        knn_search(X, k=1, metric="manhattan")


@pytest.mark.parametrize("k", [1, 5, 12])
def test_knn_matches_brute_force(rng, k):
    X = rng.normal(size=(100, 4))
    idx, dist = knn_search(X, k=k)
    oracle = brute_knn_sets(X, k)
    assert [set(r) for r in idx] == oracle
    assert np.all(np.diff(dist, axis=1) >= -1e-12)


def test_knn_graph_union_symmetrized(rng):
    X = rng.normal(size=(60, 3))
    G = build_knn_graph(X, K=4)
    A = G.adjacency
    assert (A != A.T).nnz == 0
    assert A.diagonal().sum() == 0
    oracle = brute_knn_sets(X, 4)
    union = {(i, j) for i in range(60) for j in oracle[i]}
    union |= {(j, i) for i, j in union}
    got = set(zip(*A.nonzero()))
    assert got == union
    assert set(A.data) == {1.0}


def test_knn_duplicate_rows_tie_by_index():
    X = np.zeros((5, 2))
    idx, _ = knn_search(X, k=2)
    assert idx[0].tolist() == [1, 2]
    assert idx[3].tolist() == [0, 1]


def test_cosine_metric_scale_free(rng):
    X = rng.normal(size=(40, 5))
    a, _ = knn_search(X, k=3, metric="cosine")
    b, _ = knn_search(X * rng.uniform(0.5, 3, size=(40, 1)), k=3, metric="cosine")
    np.testing.assert_array_equal(a, b)


# -- modularity and Leiden --------------------------------------------------


def test_modularity_examples():
    G = _cliques([3, 3])
    assert modularity(G, [0, 0, 0, 1, 1, 1]) == pytest.approx(0.5, abs=1e-15)
    assert modularity(G, [0] * 6) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(PreconditionError):
        modularity(graph_from_edges(3, np.zeros((0, 2))), [0, 1, 2])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.floats(0.2, 0.9), st.integers(0, 10**6), st.sampled_from([0.5, 1.0, 2.0]))
def test_modularity_matches_pair_loop(n, p, seed, gamma):
    rng = np.random.default_rng(seed)
    G = _random_graph(rng, n, p)
    if G.m == 0:
        return
    labels = rng.integers(0, 3, size=n)
    assert modularity(G, labels, gamma) == pytest.approx(modularity_pairs(G.adjacency.toarray(), labels, gamma), abs=1e-12)


def test_leiden_two_cliques():
    P = leiden(_cliques([4, 4]), seed=0)
    assert P.labels.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]


def test_leiden_two_nodes_optimal():
    G = graph_from_edges(2, [(0, 1)])
    P = leiden(G)
    assert modularity(G, P) == pytest.approx(best_modularity(G.adjacency.toarray()), abs=1e-12)


def test_leiden_barbell_optimal():
    G = _cliques([4, 4], bridges=[(3, 4)])
    P = leiden(G, seed=1)
    assert modularity(G, P) == pytest.approx(best_modularity(G.adjacency.toarray()), abs=1e-12)


def test_leiden_edge_cases():
    single = graph_from_edges(1, np.zeros((0, 2)))
    assert leiden(single).labels.tolist() == [0]
    with pytest.raises(ValidationError):
        leiden(_cliques([3]), gamma=0.0)


def test_leiden_micro_optimality_rate():
    rng = np.random.default_rng(2024)
    hits = runs = 0
    for trial in range(100):
        n = int(rng.integers(3, 9))
        G = _random_graph(rng, n, float(rng.uniform(0.25, 0.8)))
        if G.m == 0:
            continue
        runs += 1
        P = leiden(G, seed=trial)
        best = best_modularity(G.adjacency.toarray())
        hits += modularity(G, P) >= best - 1e-12
        assert np.all(np.diff(P.modularity_trace) >= -1e-12)
        assert is_connected_partition(G, P)
    assert hits / runs >= 0.95


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.floats(0.05, 0.6), st.integers(0, 10**6))
def test_leiden_properties(n, p, seed):
    rng = np.random.default_rng(seed)
    G = _random_graph(rng, n, p)
    if G.m == 0:
        return
    P = leiden(G, seed=seed)
    assert P.cluster_sizes.sum() == n
    assert set(P.labels.tolist()) == set(range(P.n_clusters))
    assert is_connected_partition(G, P)
    assert modularity(G, P) >= modularity(G, np.arange(n)) - 1e-12
    assert np.all(np.diff(P.modularity_trace) >= -1e-12)
    assert leiden(G, seed=seed) == P


def test_restarts_keep_best_run():
    rng = np.random.default_rng(5)
    for trial in range(30):
        G = _random_graph(rng, 8, 0.5)
        if G.m == 0:
            continue
        single = leiden(G, seed=trial, n_restarts=1)
        multi = leiden(G, seed=trial, n_restarts=4)
        assert modularity(G, multi) >= modularity(G, single) - 1e-12
    with pytest.raises(ValidationError):
        leiden(G, n_restarts=0)


def test_gamma_monotone_on_two_cliques():
    G = _cliques([5, 5], bridges=[(4, 5)])
    counts = [leiden(G, gamma=g, seed=0).n_clusters for g in (0.5, 1.0, 2.0)]
    assert counts == sorted(counts)


def test_leiden_disconnected_components_never_merged():
    G = _cliques([3, 3, 2])
    P = leiden(G)
    k, comp = connected_components(G.adjacency, directed=False)
    for c in range(P.n_clusters):
        assert len(set(comp[P.labels == c])) == 1


# -- clustering ---------------------------------------------------------------


def test_subsample(rng):
    E = embedding_from_array(rng.normal(size=(50, 3)))
    full = subsample_vectors(E, 50, seed=1)
    assert sorted(full.tile_ids) == sorted(E.tile_ids)
    assert subsample_vectors(E, 10, seed=3) == subsample_vectors(E, 10, seed=3)
    with pytest.raises(PreconditionError):
        subsample_vectors(E, 51)


def test_subsample_inclusion_frequency():
    E = embedding_from_array(np.zeros((10000, 1)))
    hits = np.zeros(10000)
    pos = {t: i for i, t in enumerate(E.tile_ids)}
    for s in range(500):
        for t in subsample_vectors(E, 1000, seed=s).tile_ids:
            hits[pos[t]] += 1
    freq = hits / 500
    assert np.all(np.abs(freq - 0.1) <= 0.1 * 0.3 + 0.06)
    assert abs(freq.mean() - 0.1) < 1e-12


def _blobs(rng, n_per, centres, sd=0.3):
    X = np.vstack([c + sd * rng.normal(size=(n_per, len(c))) for c in centres])
    return X, np.repeat(np.arange(len(centres)), n_per)


def test_two_pass_removes_planted_low_tissue_blob(rng):
    centres = np.array([[0, 0], [8, 0], [0, 8], [8, 8]], float)
    X, comp = _blobs(rng, 60, centres)
    tissue = np.where(comp == 3, 0.1, 0.9)
    E = embedding_from_array(X)
    clean, P = two_pass_cluster(E, K=10, artifact_rule=ArtifactRule(0.3), tissue=tissue, seed=0)
    kept = {int(t[1:]) for t in clean.tile_ids}
    assert kept == set(np.flatnonzero(comp != 3).tolist())
    direct = cluster_embeddings(embedding_from_array(X[comp != 3]), K=10, seed=0)
    assert P.labels.tolist() == direct.labels.tolist()
    assert P.first_pass.artifact_flags.sum() >= 1


def test_two_pass_without_flags_keeps_everything(rng):
    X, comp = _blobs(rng, 30, np.array([[0, 0], [6, 6]], float))
    clean, P = two_pass_cluster(embedding_from_array(X), K=5, artifact_rule=ArtifactRule(0.0), tissue=np.ones(60))
    assert len(clean) == 60
    assert P.first_pass.artifact_flags.sum() == 0
    for c in range(P.n_clusters):
        assert len(set(comp[P.labels == c])) == 1


def test_two_pass_errors(rng):
    E = embedding_from_array(rng.normal(size=(30, 2)))
    with pytest.raises(ValidationError):
        two_pass_cluster(E, K=5, artifact_rule=ArtifactRule(1.1), tissue=np.zeros(30))
    with pytest.raises(PreconditionError):
        two_pass_cluster(E, K=5)


def test_assign_examples():
    model = ClusterModel(np.array([[0.0], [1.0], [10.0]]), [0, 1, 2], k_assign=1)
    assert assign_clusters(model, np.array([[1.0], [10.0]])).tolist() == [1, 2]
    tie = ClusterModel(np.array([[-1.0], [1.0]]), [1, 0], k_assign=2)
    assert assign_clusters(tie, np.array([[0.0]])).tolist() == [0]
    with pytest.raises(ValidationError):
        assign_clusters(model, np.zeros((1, 2)))


def test_assign_artifact_loses_ties():
    model = ClusterModel(np.array([[-1.0], [1.0]]), [ARTIFACT, 0], k_assign=2, n_clusters=1)
    assert assign_clusters(model, np.array([[0.0]])).tolist() == [0]
    model = ClusterModel(np.array([[-1.0], [-0.9], [1.0]]), [ARTIFACT, ARTIFACT, 0], k_assign=3, n_clusters=1)
    assert assign_clusters(model, np.array([[-1.0]])).tolist() == [ARTIFACT]


def test_assign_planted_recovery(rng):
    centres = 6.0 * np.eye(4)
    X, comp = _blobs(rng, 300, centres, sd=1.0)
    model = ClusterModel(X, comp, k_assign=15)
    Xh, comph = _blobs(np.random.default_rng(9), 125, centres, sd=1.0)
    labels = assign_clusters(model, Xh)
    assert (labels == comph).mean() >= 0.95
    np.testing.assert_array_equal(labels, assign_clusters(model, Xh, chunk=7))


def test_cluster_purity():
    out = cluster_purity(Partition([0, 0, 0, 0, 1, 1]), ["LUAD", "LUAD", "LUSC", "LUAD", "LUSC", "LUSC"])
    assert out == {0: ("LUAD", 0.75), 1: ("LUSC", 1.0)}
    with pytest.raises(ValidationError):
        cluster_purity(Partition([0, 1]), ["a"])


def test_partition_validation():
    with pytest.raises(ValidationError):
        Partition([0, 2])
    with pytest.raises(ValidationError):
        ClusterModel(np.zeros((3, 2)), [0, 1])
    with pytest.raises(ValidationError):
        ClusterModel(np.zeros((2, 2)), [0, 1], k_assign=0)
