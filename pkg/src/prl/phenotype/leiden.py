"""Leiden community detection with the modularity quality function.

Quality of a partition (``e_c`` counts ordered node pairs inside ``c``, i.e.
twice the intra-community edge weight, and ``K_c`` is the summed degree)::

    H = 1/(2m) * sum_c (e_c - gamma * K_c**2 / (2m))

The optimiser follows Traag, Waltman & van Eck (2019): fast local moving,
refinement of each community by randomized merges of singletons into
well-connected sub-communities, then aggregation of the refined partition
with the unrefined one as the starting point on the coarse graph.  Merge
candidates during refinement are drawn uniformly among the moves that do not
decrease quality.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from ..errors import PreconditionError, ValidationError


@dataclass
class Partition:
    labels: np.ndarray
    gamma: float = 1.0
    seed: int = 0
    artifact_flags: np.ndarray = None
    node_ids: list = None
    modularity_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n_clusters = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or np.unique(self.labels).size != n_clusters):
            raise ValidationError("partition labels must be dense in 0..C-1")
        if self.artifact_flags is None:
            self.artifact_flags = np.zeros(n_clusters, dtype=bool)
        self.artifact_flags = np.asarray(self.artifact_flags, dtype=bool)
        if self.artifact_flags.size != n_clusters:
            raise ValidationError("one artifact flag per cluster is required")
        if self.node_ids is not None and len(self.node_ids) != self.labels.size:
            raise ValidationError("node_ids and labels differ in length")

    @property
    def n_clusters(self):
        return int(self.artifact_flags.size)

    @property
    def cluster_sizes(self):
        return np.bincount(self.labels, minlength=self.n_clusters)

    def members(self, c):
        return np.flatnonzero(self.labels == c)

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return (
            np.array_equal(self.labels, other.labels)
            and self.gamma == other.gamma
            and self.seed == other.seed
            and np.array_equal(self.artifact_flags, other.artifact_flags)
            and (list(self.node_ids) if self.node_ids is not None else None)
            == (list(other.node_ids) if other.node_ids is not None else None)
            and list(self.modularity_trace) == list(other.modularity_trace)
        )


def relabel(labels, degrees=None):
    """Dense labels ordered by decreasing size, ties by smallest member."""
    labels = np.asarray(labels)
    uniq, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    first = np.full(uniq.size, labels.size)
    np.minimum.at(first, inverse, np.arange(labels.size))
    order = np.lexsort((first, -counts))
    rank = np.empty(uniq.size, dtype=np.int64)
    rank[order] = np.arange(uniq.size)
    return rank[inverse]


def _adjacency(G):
    return G.adjacency if hasattr(G, "adjacency") else sp.csr_matrix(G)


def modularity(G, P, gamma=None):
    """Quality ``H`` of partition ``P`` (labels or :class:`Partition`) on ``G``."""
    A = _adjacency(G)
    labels = P.labels if isinstance(P, Partition) else np.asarray(P)
    if gamma is None:
        gamma = P.gamma if isinstance(P, Partition) else 1.0
    if labels.size != A.shape[0]:
        raise PreconditionError("partition does not cover every node")
    two_m = float(A.sum())
    if two_m <= 0:
        raise PreconditionError("modularity is undefined on a graph without edges")
    coo = A.tocoo()
    inside = float(coo.data[labels[coo.row] == labels[coo.col]].sum())
    deg = np.asarray(A.sum(axis=1)).ravel()
    K = np.bincount(labels, weights=deg)
    return (inside - gamma * float(np.dot(K, K)) / two_m) / two_m


class _Level:
    """Graph at one aggregation level as Python lists (fast scalar access)."""

    def __init__(self, A):
        A = sp.csr_matrix(A)
        A.sum_duplicates()
        self.n = A.shape[0]
        diag = A.diagonal()
        off = A - sp.diags(diag)
        off = sp.csr_matrix(off)
        off.eliminate_zeros()
        self.self_w = diag.astype(float)
        self.nbrs = [off.indices[off.indptr[i]:off.indptr[i + 1]].tolist() for i in range(self.n)]
        self.wts = [off.data[off.indptr[i]:off.indptr[i + 1]].tolist() for i in range(self.n)]
        self.deg = np.asarray(A.sum(axis=1)).ravel().tolist()
        self.A = A


def _move_nodes_fast(lv, comm, gamma, two_m, rng):
    n = lv.n
    deg = lv.deg
    n_comm = max(comm) + 1 if n else 0
    K = [0.0] * max(n_comm, n)
    size = [0] * max(n_comm, n)
    for i in range(n):
        K[comm[i]] += deg[i]
        size[comm[i]] += 1
    empty = [c for c in range(len(size)) if size[c] == 0]
    order = rng.permutation(n).tolist()
    queue = deque(order)
    queued = [True] * n
    changed = False
    scale = gamma / two_m
    while queue:
        i = queue.popleft()
        queued[i] = False
        ci = comm[i]
        ki = deg[i]
        w_to = {}
        for j, w in zip(lv.nbrs[i], lv.wts[i]):
            cj = comm[j]
            w_to[cj] = w_to.get(cj, 0.0) + w
        K[ci] -= ki
        size[ci] -= 1
        best_c = ci
        best_gain = w_to.get(ci, 0.0) - scale * ki * K[ci]
        for c, w in w_to.items():
            if c == ci:
                continue
            gain = w - scale * ki * K[c]
            if gain > best_gain + 1e-12:
                best_gain, best_c = gain, c
        if best_gain < -1e-12 and size[ci] > 0:
            # an empty community (gain 0) beats every option
            best_c = empty.pop() if empty else len(K)
            if best_c == len(K):
                K.append(0.0)
                size.append(0)
        K[best_c] += ki
        size[best_c] += 1
        if best_c != ci:
            changed = True
            comm[i] = best_c
            if size[ci] == 0:
                empty.append(ci)
            for j in lv.nbrs[i]:
                if not queued[j] and comm[j] != best_c:
                    queued[j] = True
                    queue.append(j)
    return changed


def _refine(lv, comm, gamma, two_m, rng):
    """Refined partition: each community of ``comm`` split into merged sub-communities."""
    n = lv.n
    deg = lv.deg
    scale = gamma / two_m
    ref = list(range(n))
    K_ref = list(deg)
    singleton = [True] * n
    K_comm = {}
    for i in range(n):
        K_comm[comm[i]] = K_comm.get(comm[i], 0.0) + deg[i]
    # weight from each refined community to the rest of its parent community
    ext = [0.0] * n
    for i in range(n):
        ci = comm[i]
        ext[i] = sum(w for j, w in zip(lv.nbrs[i], lv.wts[i]) if comm[j] == ci)
    for v in rng.permutation(n).tolist():
        if not singleton[v]:
            continue
        cv = comm[v]
        KC = K_comm[cv]
        kv = deg[v]
        if ext[v] < scale * kv * (KC - kv) - 1e-12:
            continue
        w_to = {}
        for j, w in zip(lv.nbrs[v], lv.wts[v]):
            if comm[j] == cv:
                r = ref[j]
                w_to[r] = w_to.get(r, 0.0) + w
        candidates = []
        for r, w in w_to.items():
            if r == ref[v]:
                continue
            if ext[r] < scale * K_ref[r] * (KC - K_ref[r]) - 1e-12:
                continue
            if w - scale * kv * K_ref[r] >= -1e-12:
                candidates.append(r)
        if not candidates:
            continue
        candidates.sort()
        target = candidates[int(rng.integers(len(candidates)))]
        old = ref[v]
        ext[target] = ext[target] + ext[v] - 2.0 * w_to[target]
        K_ref[target] += kv
        K_ref[old] -= kv
        ref[v] = target
        singleton[v] = False
        singleton[target] = False
    return ref


def _aggregate(lv, ref):
    uniq, dense = np.unique(np.asarray(ref), return_inverse=True)
    n_new = uniq.size
    S = sp.csr_matrix((np.ones(lv.n), (np.arange(lv.n), dense)), shape=(lv.n, n_new))
    M = (S.T @ lv.A @ S).tocsr()
    return M, dense


def _split_disconnected(A, labels):
    out = labels.copy()
    nxt = labels.max() + 1 if labels.size else 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < 2:
            continue
        sub = A[members][:, members]
        k, comp = connected_components(sub, directed=False)
        for extra in range(1, k):
            out[members[comp == extra]] = nxt
            nxt += 1
    return out


def _leiden_once(A, init, gamma, rng, trace, two_m):
    """One full run of the multi-level loop from an initial flat partition."""
    lv = _Level(A)
    comm = list(init)
    membership = np.arange(A.shape[0])  # original node -> node of current level
    while True:
        _move_nodes_fast(lv, comm, gamma, two_m, rng)
        flat = np.asarray(comm)[membership]
        trace.append(modularity(A, flat, gamma))
        n_comm = len(set(comm))
        if n_comm == lv.n:
            break
        ref = _refine(lv, comm, gamma, two_m, rng)
        if len(set(ref)) == lv.n:
            # refinement merged nothing; coarsen by the unrefined partition
            ref = comm
        M, dense = _aggregate(lv, ref)
        coarse = np.zeros(M.shape[0], dtype=np.int64)
        coarse[dense] = comm
        _, coarse = np.unique(coarse, return_inverse=True)
        membership = dense[membership]
        lv = _Level(M)
        comm = coarse.tolist()
    return np.asarray(comm)[membership]


def _leiden_run(A, labels, gamma, rng, max_iters, two_m):
    trace = []
    best = modularity(A, labels, gamma)
    for _ in range(max(1, max_iters)):
        labels_new = _leiden_once(A, labels, gamma, rng, trace, two_m)
        q = trace[-1]
        improved = q > best + 1e-12
        if q >= best - 1e-12:
            labels, best = labels_new, max(q, best)
        if not improved:
            break
    labels = relabel(_split_disconnected(A, labels))
    final = modularity(A, labels, gamma)
    if final > trace[-1] + 1e-12:
        trace.append(final)
    return labels, trace, final


def leiden(G, gamma=1.0, seed=0, max_iters=10, initial=None, n_restarts=3):
    """Partition ``G`` by maximising modularity with the Leiden algorithm.

    The multi-level loop runs until local moving leaves every aggregate node
    in its own community; the whole procedure is then restarted from its own
    output (at most ``max_iters`` times) until quality stops improving.
    ``modularity_trace`` on the result records the quality after every local
    moving phase of the returned run and is non-decreasing.

    ``n_restarts`` independent runs with seed-derived random streams are made
    and the highest-quality partition kept (ties go to the earliest run).
    Run 0 draws from ``default_rng(seed)``, so ``n_restarts=1`` is the plain
    single-run algorithm.
    """
    A = sp.csr_matrix(_adjacency(G), dtype=float)
    n = A.shape[0]
    node_ids = list(G.node_ids) if hasattr(G, "node_ids") else None
    if not gamma > 0:
        raise ValidationError("resolution gamma must be positive")
    if n_restarts < 1:
        raise ValidationError("n_restarts must be >= 1")
    two_m = float(A.sum())
    if n == 0:
        return Partition(np.zeros(0, dtype=np.int64), gamma, seed, node_ids=node_ids)
    if two_m <= 0:
        labels = np.zeros(n, dtype=np.int64) if n == 1 else np.arange(n)
        return Partition(labels, gamma, seed, node_ids=node_ids)
    start = np.arange(n) if initial is None else np.unique(np.asarray(initial), return_inverse=True)[1]
    best = None
    for r in range(n_restarts):
        rng = np.random.default_rng(seed if r == 0 else [seed, r])
        run = _leiden_run(A, start, gamma, rng, max_iters, two_m)
        if best is None or run[2] > best[2] + 1e-12:
            best = run
    labels, trace, _ = best
    return Partition(labels, gamma, seed, node_ids=node_ids, modularity_trace=trace)


def is_connected_partition(G, P):
    A = sp.csr_matrix(_adjacency(G))
    labels = P.labels if isinstance(P, Partition) else np.asarray(P)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < 2:
            continue
        k, _ = connected_components(A[members][:, members], directed=False)
        if k != 1:
            return False
    return True
