"""Deterministic artifact persistence with sha256 sidecars.

Every artifact is written as a byte stream that depends only on its
content, so identical objects always produce identical checksums.

=================  ==========================================
artifact           format
=================  ==========================================
EmbeddingMatrix    ``PRLE`` binary
ClusterModel       ``PRLM`` binary
Partition          TSV ``tile_id, cluster`` with ``#`` metadata
CompositionTable   TSV ``owner_id, cluster_<id> ...``
ModelFit           fit-report TSV with ``#`` metadata
dict / list        canonical JSON (sorted keys)
=================  ==========================================
"""

import hashlib
import io
import json
import os
import struct

import numpy as np

from .composition import CompositionTable
from .errors import ArtifactError, ChecksumError, ParseError, ValidationError
from .ingest import EmbeddingMatrix, decode_embeddings, encode_embeddings
from .phenotype import ClusterModel, Partition
from .stats import ModelFit

MODEL_MAGIC = b"PRLM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sHQIIIB")
_DTYPES = {1: "<f4", 2: "<f8"}
_PARTITION_TAG = "#prl-partition v1"
_FIT_TAG = "#prl-fit v1"
_COMPOSITION_HEAD = "owner_id"


def sha256_bytes(buf):
    return hashlib.sha256(buf).hexdigest()


def canonical_json(obj):
    """Sorted-key, fixed-separator JSON; floats via ``repr`` round-trip."""
    return (json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n").encode("utf-8")


# -- encoders ---------------------------------------------------------------


def _floats(values):
    return ",".join(repr(float(v)) for v in values)


def encode_partition(P):
    out = io.StringIO()
    out.write(_PARTITION_TAG + "\n")
    out.write(f"#gamma={float(P.gamma)!r}\n")
    out.write(f"#seed={int(P.seed)}\n")
    out.write("#artifact_flags=" + ",".join("1" if f else "0" for f in P.artifact_flags) + "\n")
    out.write("#modularity_trace=" + _floats(P.modularity_trace) + "\n")
    out.write(f"#node_ids={'explicit' if P.node_ids is not None else 'implicit'}\n")
    out.write("tile_id\tcluster\n")
    ids = P.node_ids if P.node_ids is not None else [str(i) for i in range(P.labels.size)]
    for t, c in zip(ids, P.labels):
        out.write(f"{t}\t{int(c)}\n")
    return out.getvalue().encode("utf-8")


def _split_meta(text, tag, source):
    lines = text.split("\n")
    if not lines or lines[0] != tag:
        raise ParseError(f"{source}: expected {tag!r} header")
    meta = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].partition("=")
        meta[key] = value
        i += 1
    body = [ln for ln in lines[i:] if ln]
    return meta, body


def _parse_floats(s):
    return [float(v) for v in s.split(",")] if s else []


def decode_partition(buf, source="<bytes>"):
    meta, body = _split_meta(buf.decode("utf-8"), _PARTITION_TAG, source)
    try:
        if not body or body[0] != "tile_id\tcluster":
            raise ParseError(f"{source}: missing 'tile_id<TAB>cluster' header")
        pairs = [ln.split("\t") for ln in body[1:]]
        if any(len(p) != 2 for p in pairs):
            raise ParseError(f"{source}: malformed partition row")
        flags = [v == "1" for v in meta["artifact_flags"].split(",")] if meta["artifact_flags"] else []
        return Partition(
            labels=np.array([int(p[1]) for p in pairs], dtype=np.int64),
            gamma=float(meta["gamma"]),
            seed=int(meta["seed"]),
            artifact_flags=np.array(flags, dtype=bool),
            node_ids=[p[0] for p in pairs] if meta["node_ids"] == "explicit" else None,
            modularity_trace=_parse_floats(meta["modularity_trace"]),
        )
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{source}: bad partition metadata ({exc})") from exc


def encode_cluster_model(model):
    data = np.asarray(model.data)
    code = 1 if data.dtype == np.float32 else 2
    data = np.ascontiguousarray(data, dtype=_DTYPES[code])
    metric = model.metric.encode("utf-8")
    parts = [
        _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, data.shape[0], data.shape[1], model.n_clusters, model.k_assign, code),
        struct.pack("<I", len(metric)),
        metric,
        data.tobytes(),
        np.ascontiguousarray(model.labels, dtype="<i8").tobytes(),
        struct.pack("<B", model.tile_ids is not None),
    ]
    for t in model.tile_ids or ():
        raw = str(t).encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw]
    return b"".join(parts)


def decode_cluster_model(buf, source="<bytes>"):
    try:
        magic, version, n, d, n_clusters, k_assign, code = _MODEL_HEADER.unpack_from(buf, 0)
        if magic != MODEL_MAGIC or version != MODEL_VERSION or code not in _DTYPES:
            raise ParseError(f"{source}: not a version-{MODEL_VERSION} cluster model")
        off = _MODEL_HEADER.size
        (ln,) = struct.unpack_from("<I", buf, off)
        metric = buf[off + 4:off + 4 + ln].decode("utf-8")
        off += 4 + ln
        dt = np.dtype(_DTYPES[code])
        data = np.frombuffer(buf, dtype=dt, count=n * d, offset=off).reshape(n, d)
        data = data.astype(np.float32 if code == 1 else np.float64)
        off += n * d * dt.itemsize
        labels = np.frombuffer(buf, dtype="<i8", count=n, offset=off).astype(np.int64)
        off += 8 * n
        (has_ids,) = struct.unpack_from("<B", buf, off)
        off += 1
        ids = None
        if has_ids:
            ids = []
            for _ in range(n):
                (ln,) = struct.unpack_from("<I", buf, off)
                ids.append(buf[off + 4:off + 4 + ln].decode("utf-8"))
                off += 4 + ln
    except (struct.error, ValueError) as exc:
        raise ParseError(f"{source}: truncated cluster model ({exc})") from exc
    if off != len(buf):
        raise ParseError(f"{source}: {len(buf) - off} trailing bytes")
    return ClusterModel(data, labels, k_assign, metric, n_clusters, ids)


def encode_composition(table):
    out = io.StringIO()
    out.write("\t".join([_COMPOSITION_HEAD] + [f"cluster_{c}" for c in table.cluster_ids]) + "\n")
    for o, row in zip(table.owner_ids, table.W):
        out.write("\t".join([str(o)] + [repr(float(v)) for v in row]) + "\n")
    return out.getvalue().encode("utf-8")


def decode_composition(buf, source="<bytes>"):
    lines = [ln for ln in buf.decode("utf-8").split("\n") if ln]
    head = lines[0].split("\t")
    try:
        cluster_ids = [int(c.split("_", 1)[1]) for c in head[1:]]
        rows = [ln.split("\t") for ln in lines[1:]]
        W = np.array([[float(v) for v in r[1:]] for r in rows], dtype=float).reshape(len(rows), len(cluster_ids))
    except (IndexError, ValueError) as exc:
        raise ParseError(f"{source}: malformed composition table ({exc})") from exc
    return CompositionTable([r[0] for r in rows], W, cluster_ids)


_FIT_SCALARS = ("model", "converged", "iterations", "log_likelihood", "intercept", "intercept_se", "ridge", "grad_norm")


def _scalar(v):
    if v is None:
        return "None"
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def encode_fit(fit, alpha=0.05):
    out = io.StringIO()
    out.write(_FIT_TAG + "\n")
    for key in _FIT_SCALARS:
        out.write(f"#{key}={_scalar(getattr(fit, key))}\n")
    out.write("feature\tcoefficient\tstd_error\tp_value\tsignificant\n")
    for name, b, se, p in zip(fit.feature_names, fit.coefficients, fit.std_errors, fit.p_values):
        out.write(f"{name}\t{float(b)!r}\t{float(se)!r}\t{float(p)!r}\t{int(p < alpha)}\n")
    return out.getvalue().encode("utf-8")


def decode_fit(buf, source="<bytes>"):
    meta, body = _split_meta(buf.decode("utf-8"), _FIT_TAG, source)
    rows = [ln.split("\t") for ln in body[1:]]

    def opt(key):
        return None if meta[key] == "None" else float(meta[key])

    try:
        return ModelFit(
            feature_names=[r[0] for r in rows],
            coefficients=np.array([float(r[1]) for r in rows]),
            std_errors=np.array([float(r[2]) for r in rows]),
            p_values=np.array([float(r[3]) for r in rows]),
            converged=meta["converged"] == "1",
            iterations=int(meta["iterations"]),
            log_likelihood=float(meta["log_likelihood"]),
            model=meta["model"],
            intercept=opt("intercept"),
            intercept_se=opt("intercept_se"),
            ridge=float(meta["ridge"]),
            grad_norm=float(meta["grad_norm"]),
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise ParseError(f"{source}: malformed fit report ({exc})") from exc


# -- public API -------------------------------------------------------------


def encode_artifact(obj):
    if isinstance(obj, EmbeddingMatrix):
        return encode_embeddings(obj)
    if isinstance(obj, ClusterModel):
        return encode_cluster_model(obj)
    if isinstance(obj, Partition):
        return encode_partition(obj)
    if isinstance(obj, CompositionTable):
        return encode_composition(obj)
    if isinstance(obj, ModelFit):
        return encode_fit(obj)
    if isinstance(obj, (dict, list)):
        return canonical_json(obj)
    raise ValidationError(f"no serialization for {type(obj).__name__}")


def decode_artifact(buf, source="<bytes>"):
    if buf[:4] == b"PRLE":
        return decode_embeddings(buf, source)
    if buf[:4] == MODEL_MAGIC:
        return decode_cluster_model(buf, source)
    if buf.startswith(_PARTITION_TAG.encode()):
        return decode_partition(buf, source)
    if buf.startswith(_FIT_TAG.encode()):
        return decode_fit(buf, source)
    if buf.startswith(_COMPOSITION_HEAD.encode() + b"\t"):
        return decode_composition(buf, source)
    try:
        return json.loads(buf.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{source}: unrecognised artifact format") from exc


def sidecar_path(path):
    return f"{os.fspath(path)}.sha256"


def persist_artifact(obj, path):
    """Write ``obj`` plus a ``.sha256`` sidecar; return the hex checksum."""
    buf = encode_artifact(obj)
    digest = sha256_bytes(buf)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf)
    os.replace(tmp, path)
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        fh.write(f"{digest}  {os.path.basename(path)}\n")
    return digest


def read_checksum(path):
    try:
        with open(sidecar_path(path), encoding="utf-8") as fh:
            return fh.read().split()[0]
    except (OSError, IndexError) as exc:
        raise ArtifactError(f"{path}: checksum sidecar missing") from exc


def load_artifact(path, verify=True):
    """Read an artifact written by :func:`persist_artifact`.

    Raises ChecksumError when the bytes no longer match the sidecar.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ArtifactError(f"{path}: artifact not found")
    with open(path, "rb") as fh:
        buf = fh.read()
    if verify:
        expected = read_checksum(path)
        actual = sha256_bytes(buf)
        if actual != expected:
            raise ChecksumError(f"{path}: checksum mismatch (expected {expected[:12]}, got {actual[:12]})")
    return decode_artifact(buf, source=path)
