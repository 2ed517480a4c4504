"""Compositional slide/patient vectors, zero replacement and the CLR transform."""

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError, ValidationError
from .ingest import read_tsv, write_tsv


@dataclass
class CompositionVector:
    owner_id: str
    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if np.any(self.w < 0) or abs(self.w.sum() - 1.0) > 1e-9:
            raise ValidationError(f"{self.owner_id}: composition must be non-negative and sum to 1")

    @property
    def C(self):
        return self.w.size


@dataclass
class ClrVector:
    owner_id: str
    values: np.ndarray


@dataclass
class CompositionTable:
    """Rows are owners (slides or patients), columns cluster ids."""

    owner_ids: list
    W: np.ndarray
    cluster_ids: list = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if self.W.ndim != 2 or self.W.shape[0] != len(self.owner_ids):
            raise ValidationError("composition table rows must align with owners")
        if self.cluster_ids is None:
            self.cluster_ids = list(range(self.W.shape[1]))

    def rows(self, owner_ids):
        pos = {o: i for i, o in enumerate(self.owner_ids)}
        missing = [o for o in owner_ids if o not in pos]
        if missing:
            raise ValidationError(f"no composition for owner(s) {missing[:5]}")
        return self.W[[pos[o] for o in owner_ids]]

    def vectors(self):
        return [CompositionVector(o, w) for o, w in zip(self.owner_ids, self.W)]

    def __eq__(self, other):
        if not isinstance(other, CompositionTable):
            return NotImplemented
        return (
            list(self.owner_ids) == list(other.owner_ids)
            and list(self.cluster_ids) == list(other.cluster_ids)
            and np.array_equal(self.W, other.W)
        )


def compose(tile_clusters, tile_owner, n_clusters, owners=None):
    """Per-owner cluster proportions.

    Parameters
    ----------
    tile_clusters : sequence of int
        Cluster label per tile; negative labels (artifact tiles) are skipped.
    tile_owner : sequence of str
        Owner (slide or patient id) per tile.  Patient-level vectors pool the
        tiles of all the patient's slides: pass the patient id per tile.
    n_clusters : int
    owners : sequence of str, optional
        Owners to emit, in this order.  Defaults to order of first appearance.

    Returns
    -------
    list of CompositionVector
    """
    labels = np.asarray(tile_clusters, dtype=np.int64)
    tile_owner = list(tile_owner)
    if labels.size != len(tile_owner):
        raise ValidationError("one owner per tile is required")
    if labels.size and labels.max() >= n_clusters:
        raise ValidationError(f"cluster label {labels.max()} outside 0..{n_clusters - 1}")
    if owners is None:
        owners = list(dict.fromkeys(tile_owner))
    pos = {o: i for i, o in enumerate(owners)}
    counts = np.zeros((len(owners), n_clusters))
    keep = labels >= 0
    rows = np.array([pos.get(o, -1) for o in tile_owner], dtype=np.int64)
    keep &= rows >= 0
    np.add.at(counts, (rows[keep], labels[keep]), 1.0)
    totals = counts.sum(axis=1)
    empty = [owners[i] for i in np.flatnonzero(totals == 0)]
    if empty:
        raise ValidationError(f"owner(s) with zero tiles: {empty[:5]}")
    W = counts / totals[:, None]
    return [CompositionVector(o, w) for o, w in zip(owners, W)]


def compose_table(tile_clusters, tile_owner, n_clusters, owners=None):
    vecs = compose(tile_clusters, tile_owner, n_clusters, owners)
    return CompositionTable([v.owner_id for v in vecs], np.array([v.w for v in vecs]).reshape(len(vecs), n_clusters))


def multiplicative_replacement(w, delta):
    """Replace zeros by ``delta`` and shrink the other parts to keep unit sum.

    Non-zero parts are multiplied by ``1 - z*delta`` with ``z`` the number of
    zeros.  Works on a single composition or row-wise on a matrix.
    """
    owner = None
    if isinstance(w, CompositionVector):
        owner, w = w.owner_id, w.w
    w = np.asarray(w, dtype=float)
    if not delta > 0:
        raise PreconditionError("delta must be positive")
    zeros = w == 0
    z = zeros.sum(axis=-1, keepdims=True)
    if np.any(z * delta >= 1.0):
        raise PreconditionError(f"delta={delta} infeasible: {int(z.max())} zeros * delta >= 1")
    out = np.where(zeros, delta, w * (1.0 - z * delta))
    if owner is not None:
        return CompositionVector(owner, out)
    return out


def clr_transform(w):
    """Centred log-ratio ``log(w_i / g(w))`` computed as ``log w_i - mean(log w)``."""
    owner = None
    if isinstance(w, CompositionVector):
        owner, w = w.owner_id, w.w
    w = np.asarray(w, dtype=float)
    if np.any(~(w > 0)):
        raise PreconditionError("CLR needs strictly positive parts")
    # shifting by the row max first keeps equal parts at exactly zero
    logw = np.log(w)
    logw = logw - logw.max(axis=-1, keepdims=True)
    out = logw - logw.mean(axis=-1, keepdims=True)
    if owner is not None:
        return ClrVector(owner, out)
    return out


def default_delta(W_train):
    """Half the smallest non-zero proportion in the training rows, capped at 1/(2C)."""
    W_train = np.asarray(W_train, dtype=float)
    C = W_train.shape[-1]
    nz = W_train[W_train > 0]
    base = 0.5 * nz.min() if nz.size else 1.0 / (2 * C)
    delta = min(base, 1.0 / (2 * C))
    # never infeasible for the rows at hand
    zmax = int((W_train == 0).sum(axis=-1).max()) if W_train.size else 0
    if zmax and zmax * delta >= 1.0:
        delta = 0.5 / zmax
    return float(delta)


def clr_features(W, delta):
    """Multiplicative replacement followed by CLR, row-wise.

    Rows whose zero count makes ``delta`` infeasible get a per-row delta of
    half the feasible bound.
    """
    W = np.asarray(W, dtype=float)
    z = (W == 0).sum(axis=1)
    out = np.empty_like(W)
    for i, row in enumerate(W):
        d = delta if z[i] * delta < 1.0 else 0.5 / z[i]
        out[i] = clr_transform(multiplicative_replacement(row, d))
    return out


def write_composition_tsv(table, path):
    header = ["owner_id"] + [f"cluster_{c}" for c in table.cluster_ids]
    rows = [[o] + [repr(float(v)) for v in row] for o, row in zip(table.owner_ids, table.W)]
    write_tsv(path, header, rows)


def read_composition_tsv(path):
    header, rows = read_tsv(path, ("owner_id",))
    cols = [c for c in header if c != "owner_id"]
    cluster_ids = [int(c.split("_", 1)[1]) for c in cols]
    W = np.array([[float(r[c]) for c in cols] for r in rows]).reshape(len(rows), len(cols))
    return CompositionTable([r["owner_id"] for r in rows], W, cluster_ids)
