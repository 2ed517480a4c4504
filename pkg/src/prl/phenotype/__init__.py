"""kNN graphs, Leiden communities and phenotype cluster models."""

from .clustering import (
    ARTIFACT,
    ArtifactRule,
    ClusterModel,
    assign_clusters,
    cluster_embeddings,
    cluster_purity,
    model_from_two_pass,
    subsample_vectors,
    two_pass_cluster,
)
from .knn import ExactBackend, NeighborGraph, build_knn_graph, graph_from_edges, knn_search
from .leiden import Partition, is_connected_partition, leiden, modularity
