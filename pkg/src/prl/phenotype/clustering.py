"""Phenotype clusters: sampling, two-pass artifact removal, held-out assignment."""

from collections import Counter
from dataclasses import dataclass

import numpy as np

from ..errors import PreconditionError, ValidationError
from ..ingest import EmbeddingMatrix
from .knn import build_knn_graph, knn_search
from .leiden import Partition, leiden

ARTIFACT = -1


def subsample_vectors(E, n=200_000, seed=0):
    """Uniform sample of ``n`` rows without replacement, original order kept."""
    N = len(E)
    if n > N:
        raise PreconditionError(f"cannot sample {n} of {N} vectors")
    idx = np.sort(np.random.default_rng(seed).choice(N, size=n, replace=False))
    return E.take(idx)


@dataclass(frozen=True)
class ArtifactRule:
    """Flags first-pass clusters as background/artifact.

    A cluster is flagged when the mean tissue fraction of its tiles is below
    ``min_mean_tissue`` or when its id is listed in ``manual``.
    """

    min_mean_tissue: float = 0.3
    manual: frozenset = frozenset()

    def __call__(self, partition, tissue):
        flags = np.zeros(partition.n_clusters, dtype=bool)
        if tissue is not None:
            tissue = np.asarray(tissue, dtype=float)
            sums = np.bincount(partition.labels, weights=tissue, minlength=partition.n_clusters)
            means = sums / np.maximum(partition.cluster_sizes, 1)
            flags |= means < self.min_mean_tissue
        for c in self.manual:
            if 0 <= c < flags.size:
                flags[c] = True
        return flags


def cluster_embeddings(E, K=250, gamma=1.0, seed=0, metric="euclidean", max_iters=10, n_restarts=3):
    G = build_knn_graph(E, K, metric=metric)
    P = leiden(G, gamma=gamma, seed=seed, max_iters=max_iters, n_restarts=n_restarts)
    P.node_ids = list(E.tile_ids)
    return P


def two_pass_cluster(
    E, K=250, gamma=1.0, artifact_rule=None, tissue=None, seed=0, metric="euclidean", max_iters=10, n_restarts=3
):
    """Cluster, drop flagged clusters, cluster the remainder again.

    Returns ``(clean_E, partition)``; the first-pass partition with its
    artifact flags is attached as ``partition.first_pass``.
    """
    if artifact_rule is None:
        raise PreconditionError("an artifact rule is required")
    first = cluster_embeddings(E, K, gamma, seed, metric, max_iters, n_restarts)
    first.artifact_flags = np.asarray(artifact_rule(first, tissue), dtype=bool)
    keep = ~first.artifact_flags[first.labels]
    if not keep.any():
        raise ValidationError("artifact rule flagged every cluster; nothing left to cluster")
    clean = E.take(np.flatnonzero(keep))
    if K >= len(clean):
        raise PreconditionError(f"only {len(clean)} tiles survive artifact removal, K={K} too large")
    second = cluster_embeddings(clean, K, gamma, seed, metric, max_iters, n_restarts)
    second.first_pass = first
    return clean, second


@dataclass
class ClusterModel:
    """Reference vectors with their cluster labels (``-1`` marks artifact tiles)."""

    data: np.ndarray
    labels: np.ndarray
    k_assign: int = 250
    metric: str = "euclidean"
    n_clusters: int = None
    tile_ids: list = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 2 or self.data.shape[0] != self.labels.size:
            raise ValidationError("cluster model labels must align with data rows")
        if self.k_assign < 1:
            raise ValidationError("k_assign must be >= 1")
        if self.n_clusters is None:
            self.n_clusters = int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def dim(self):
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ClusterModel):
            return NotImplemented
        return (
            np.array_equal(self.data, other.data)
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.labels, other.labels)
            and self.k_assign == other.k_assign
            and self.metric == other.metric
            and self.n_clusters == other.n_clusters
            and (self.tile_ids or None) == (other.tile_ids or None)
        )


def model_from_two_pass(E, clean, partition, k_assign=250, metric="euclidean"):
    """Cluster model over every sampled vector; removed tiles keep label -1."""
    pos = {t: i for i, t in enumerate(clean.tile_ids)}
    labels = np.array([partition.labels[pos[t]] if t in pos else ARTIFACT for t in E.tile_ids], dtype=np.int64)
    return ClusterModel(E.data, labels, k_assign, metric, partition.n_clusters, list(E.tile_ids))


def assign_clusters(model, E_new, chunk=4096):
    """Majority label among each vector's ``k_assign`` nearest reference vectors.

    Ties go to the smallest cluster id; the artifact label only wins outright
    majorities over real clusters.
    """
    data = E_new.data if hasattr(E_new, "data") else np.asarray(E_new)
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise ValidationError(f"dimension mismatch: model has D={model.dim}, input has {data.shape[-1]}")
    k = min(model.k_assign, model.labels.size)
    C = model.n_clusters
    # artifact votes sit after every real cluster so they lose ties
    vote_labels = np.where(model.labels == ARTIFACT, C, model.labels)
    out = np.empty(data.shape[0], dtype=np.int64)
    for start in range(0, data.shape[0], chunk):
        q = data[start:start + chunk]
        idx, _ = knn_search(model.data, q, k, metric=model.metric)
        votes = np.zeros((q.shape[0], C + 1), dtype=np.int64)
        np.add.at(votes, (np.repeat(np.arange(q.shape[0]), k), vote_labels[idx].ravel()), 1)
        out[start:start + q.shape[0]] = votes.argmax(axis=1)
    out[out == C] = ARTIFACT
    return out


def cluster_purity(partition, tile_labels):
    """Per cluster ``(dominant_label, fraction of tiles carrying it)``."""
    labels = partition.labels if isinstance(partition, Partition) else np.asarray(partition)
    n_clusters = partition.n_clusters if isinstance(partition, Partition) else int(labels.max()) + 1
    tile_labels = list(tile_labels)
    if len(tile_labels) != labels.size:
        raise ValidationError("one label per tile is required")
    out = {}
    for c in range(n_clusters):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            raise ValidationError(f"cluster {c} is empty")
        counts = Counter(tile_labels[i] for i in members)
        top = max(counts.values())
        dominant = min(lab for lab, v in counts.items() if v == top)
        out[c] = (dominant, top / members.size)
    return out


def embedding_from_array(data, prefix="t"):
    data = np.asarray(data)
    return EmbeddingMatrix([f"{prefix}{i}" for i in range(data.shape[0])], data)
