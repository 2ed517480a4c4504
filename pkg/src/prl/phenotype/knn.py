"""Exact k-nearest-neighbour search and the symmetrized kNN graph."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..errors import PreconditionError, ValidationError

METRICS = ("euclidean", "cosine")


def _prepare(X, metric):
    X = np.asarray(X, dtype=np.float64)
    if metric == "cosine":
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X / np.where(norms > 0, norms, 1.0)
    elif metric != "euclidean":
        raise ValidationError(f"unknown metric {metric!r}, expected one of {METRICS}")
    return X


def _first_k(D, k):
    """Column indices of the k smallest entries per row, ties by index."""
    m, n = D.shape
    if k >= n:
        return np.argsort(D, axis=1, kind="stable")[:, :k]
    part = np.argpartition(D, k - 1, axis=1)[:, :k]
    rows = np.arange(m)[:, None]
    vals = D[rows, part]
    order = np.lexsort((part, vals), axis=1)
    part = part[rows, order]
    kth = D[np.arange(m), part[:, -1]]
    # rows where the k-th distance is shared with an unselected column
    ambiguous = np.flatnonzero((D <= kth[:, None]).sum(axis=1) > k)
    for r in ambiguous:
        part[r] = np.argsort(D[r], kind="stable")[:k]
    return part


class ExactBackend:
    """Brute-force search over dense distance blocks.

    Any object with the same ``query`` signature can stand in for this (an
    approximate index, say); results must be sorted nearest-first.
    """

    def __init__(self, chunk_bytes=64 << 20):
        self.chunk_bytes = chunk_bytes

    def query(self, data, queries, k, exclude_self=False):
        n = data.shape[0]
        sq_data = np.einsum("ij,ij->i", data, data)
        rows_per_chunk = max(1, self.chunk_bytes // (8 * max(n, 1)))
        out_idx = np.empty((queries.shape[0], k), dtype=np.int64)
        out_dist = np.empty((queries.shape[0], k))
        for start in range(0, queries.shape[0], rows_per_chunk):
            q = queries[start:start + rows_per_chunk]
            D = q @ data.T
            D *= -2.0
            D += np.einsum("ij,ij->i", q, q)[:, None]
            D += sq_data[None, :]
            np.maximum(D, 0.0, out=D)
            if exclude_self:
                D[np.arange(q.shape[0]), np.arange(start, start + q.shape[0])] = np.inf
            idx = _first_k(D, k)
            out_idx[start:start + q.shape[0]] = idx
            out_dist[start:start + q.shape[0]] = np.sqrt(D[np.arange(q.shape[0])[:, None], idx])
        return out_idx, out_dist


def knn_search(data, queries=None, k=1, metric="euclidean", backend=None):
    """k nearest rows of ``data`` for each query row.

    With ``queries=None`` the data is queried against itself and each point
    is excluded from its own neighbour list.
    """
    backend = backend or ExactBackend()
    X = _prepare(data, metric)
    self_query = queries is None
    Q = X if self_query else _prepare(queries, metric)
    if Q.shape[1] != X.shape[1]:
        raise ValidationError(f"dimension mismatch: {Q.shape[1]} vs {X.shape[1]}")
    limit = X.shape[0] - 1 if self_query else X.shape[0]
    if k < 1 or k > limit:
        raise PreconditionError(f"K={k} must satisfy 1 <= K <= {limit}")
    return backend.query(X, Q, k, exclude_self=self_query)


@dataclass
class NeighborGraph:
    """Undirected graph in CSR form; every edge is stored in both directions."""

    node_ids: list
    adjacency: sp.csr_matrix
    K: int

    @property
    def n(self):
        return self.adjacency.shape[0]

    @property
    def m(self):
        """Total undirected edge weight."""
        return float(self.adjacency.sum()) / 2.0

    def degrees(self):
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    def neighbors(self, i):
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]


def graph_from_edges(n, edges, weights=None, node_ids=None):
    """Undirected graph from an edge list (used for small hand-built graphs)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    w = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(edges[:, 0] == edges[:, 1]):
        raise ValidationError("self-loops are not allowed")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValidationError("edge weights must be finite and non-negative")
    A = sp.coo_matrix((w, (edges[:, 0], edges[:, 1])), shape=(n, n)).tocsr()
    A = A.maximum(A.T).tocsr()
    A.sort_indices()
    ids = list(node_ids) if node_ids is not None else [str(i) for i in range(n)]
    return NeighborGraph(ids, A, K=0)


def build_knn_graph(E, K=250, metric="euclidean", backend=None):
    """Unweighted, union-symmetrized K-nearest-neighbour graph over embedding rows."""
    data = E.data if hasattr(E, "data") else np.asarray(E)
    ids = list(E.tile_ids) if hasattr(E, "tile_ids") else [str(i) for i in range(len(data))]
    n = data.shape[0]
    if K >= n:
        raise PreconditionError(f"K={K} must be smaller than the number of points N={n}")
    idx, _ = knn_search(data, None, K, metric=metric, backend=backend)
    rows = np.repeat(np.arange(n), K)
    A = sp.coo_matrix((np.ones(n * K), (rows, idx.ravel())), shape=(n, n)).tocsr()
    A = A.maximum(A.T).tocsr()
    A.sort_indices()
    return NeighborGraph(ids, A, K)
