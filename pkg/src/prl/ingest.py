"""Cohort manifests, survival/annotation tables and the embedding binary.

Tables are tab-separated with a mandatory header row.  Unknown columns are
kept in ``extra`` and otherwise ignored.  Embeddings use the ``PRLE`` binary
layout::

    b"PRLE" | version u16 | N u64 | D u32 | N*D float32 (row-major)
    | N x (u32 byte length + UTF-8 tile_id)

All integers are little-endian.
"""

import csv
import io
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ReferentialError, ValidationError

EMBEDDING_MAGIC = b"PRLE"
EMBEDDING_VERSION = 1
_HEADER = struct.Struct("<4sHQI")

ENDPOINTS = ("overall_survival", "recurrence_free")
_ENDPOINT_ALIASES = {"os": "overall_survival", "rfs": "recurrence_free"}
CELL_TYPES = ("neoplastic", "connective", "inflammatory", "dead")
GROWTH_PATTERNS = ("solid", "acinar", "papillary", "micropapillary", "lepidic")


def normalize_endpoint(name):
    name = _ENDPOINT_ALIASES.get(name, name)
    if name not in ENDPOINTS:
        raise ValidationError(f"unknown survival endpoint {name!r}")
    return name


def read_tsv(path, required):
    """Read a TSV with header; returns (header, list of row dicts)."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh, delimiter="\t")
            try:
                header = next(reader)
            except StopIteration:
                raise ParseError(f"{path}: empty file, header row required")
            missing = [c for c in required if c not in header]
            if missing:
                raise ParseError(f"{path}: missing column(s) {', '.join(missing)}")
            rows = []
            for lineno, values in enumerate(reader, start=2):
                if not values or (len(values) == 1 and not values[0].strip()):
                    continue
                if len(values) != len(header):
                    raise ParseError(
                        f"{path}:{lineno}: expected {len(header)} fields, got {len(values)}"
                    )
                rows.append(dict(zip(header, values)))
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return header, rows


def write_tsv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class SlideEntry:
    slide_id: str
    patient_id: str
    institution_id: str
    label: str = None
    extra: tuple = ()


@dataclass
class CohortManifest:
    cohort_id: str
    slides: list
    label_set: tuple = ()

    def __post_init__(self):
        self._by_slide = {s.slide_id: s for s in self.slides}

    def __len__(self):
        return len(self.slides)

    def slide(self, slide_id):
        return self._by_slide[slide_id]

    @property
    def slide_ids(self):
        return [s.slide_id for s in self.slides]

    @property
    def patients(self):
        seen = {}
        for s in self.slides:
            seen.setdefault(s.patient_id, None)
        return list(seen)

    @property
    def institutions(self):
        seen = {}
        for s in self.slides:
            seen.setdefault(s.institution_id, None)
        return list(seen)

    def slide_to_patient(self):
        return {s.slide_id: s.patient_id for s in self.slides}

    def patient_labels(self):
        out = {}
        for s in self.slides:
            out.setdefault(s.patient_id, s.label)
        return out

    def patient_institution(self):
        return {s.patient_id: s.institution_id for s in self.slides}


def validate_manifest(manifest, labels=None):
    """Check manifest invariants in place; returns the manifest."""
    seen = set()
    for s in manifest.slides:
        if not s.slide_id:
            raise ValidationError("empty slide_id")
        if s.slide_id in seen:
            raise ValidationError(f"duplicate slide_id {s.slide_id!r}")
        seen.add(s.slide_id)
        if not s.patient_id or not s.institution_id:
            raise ValidationError(f"slide {s.slide_id!r} lacks patient_id or institution_id")
    site = {}
    for s in manifest.slides:
        prev = site.setdefault(s.patient_id, s.institution_id)
        if prev != s.institution_id:
            raise ValidationError(
                f"patient {s.patient_id!r} has slides in institutions "
                f"{prev!r} and {s.institution_id!r}"
            )
    observed = sorted({s.label for s in manifest.slides if s.label is not None})
    if labels is not None:
        labels = tuple(labels)
        unknown = [lab for lab in observed if lab not in labels]
        if unknown:
            raise ReferentialError(f"label value(s) {unknown} not in declared set {list(labels)}")
        manifest.label_set = labels
    else:
        manifest.label_set = tuple(observed)
    # a patient carries one label
    plab = {}
    for s in manifest.slides:
        if s.label is None:
            continue
        prev = plab.setdefault(s.patient_id, s.label)
        if prev != s.label:
            raise ValidationError(f"patient {s.patient_id!r} has conflicting labels")
    return manifest


def load_manifest(path, labels=None, cohort_id=None):
    """Load and validate a slide manifest TSV.

    Parameters
    ----------
    path : str
        TSV with columns ``slide_id, patient_id, institution_id`` and an
        optional ``label`` column.
    labels : sequence of str, optional
        Declared closed label set.  When omitted the set of observed labels
        is used.
    """
    header, rows = read_tsv(path, ("slide_id", "patient_id", "institution_id"))
    known = {"slide_id", "patient_id", "institution_id", "label"}
    extra_cols = [c for c in header if c not in known]
    slides = []
    for r in rows:
        label = r.get("label") or None
        slides.append(
            SlideEntry(
                slide_id=r["slide_id"].strip(),
                patient_id=r["patient_id"].strip(),
                institution_id=r["institution_id"].strip(),
                label=label.strip() if label else None,
                extra=tuple((c, r[c]) for c in extra_cols),
            )
        )
    if cohort_id is None:
        cohort_id = os.path.splitext(os.path.basename(path))[0]
    return validate_manifest(CohortManifest(cohort_id, slides), labels=labels)


def write_manifest(manifest, path):
    has_label = any(s.label is not None for s in manifest.slides)
    extra_cols = []
    for s in manifest.slides:
        for c, _ in s.extra:
            if c not in extra_cols:
                extra_cols.append(c)
    header = ["slide_id", "patient_id", "institution_id"]
    if has_label:
        header.append("label")
    header += extra_cols
    rows = []
    for s in manifest.slides:
        row = [s.slide_id, s.patient_id, s.institution_id]
        if has_label:
            row.append(s.label or "")
        ex = dict(s.extra)
        row += [ex.get(c, "") for c in extra_cols]
        rows.append(row)
    write_tsv(path, header, rows)


# --------------------------------------------------------------------------
# survival


@dataclass
class SurvivalTable:
    patient_ids: list
    time: np.ndarray
    event: np.ndarray
    endpoint: str = "overall_survival"

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.event = np.asarray(self.event, dtype=bool)
        if len(self.patient_ids) != len(self.time) or len(self.time) != len(self.event):
            raise ValidationError("survival columns have different lengths")
        if len(set(self.patient_ids)) != len(self.patient_ids):
            raise ValidationError(f"duplicate patient_id in {self.endpoint} table")
        if np.any(~np.isfinite(self.time)) or np.any(self.time <= 0):
            raise ValidationError("survival times must be positive and finite")

    def lookup(self, patient_ids):
        index = {p: i for i, p in enumerate(self.patient_ids)}
        missing = [p for p in patient_ids if p not in index]
        if missing:
            raise ReferentialError(f"no survival record for patient(s) {missing[:5]}")
        idx = np.array([index[p] for p in patient_ids], dtype=int)
        return self.time[idx], self.event[idx]


def load_survival(path, endpoint=None):
    """Load a survival TSV.

    Returns a dict ``endpoint -> SurvivalTable``, or a single table when
    ``endpoint`` is given.
    """
    _, rows = read_tsv(path, ("patient_id", "time_months", "event", "endpoint"))
    grouped = {}
    for lineno, r in enumerate(rows, start=2):
        ep = normalize_endpoint(r["endpoint"].strip())
        try:
            t = float(r["time_months"])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad time_months {r['time_months']!r}")
        ev = r["event"].strip()
        if ev not in ("0", "1"):
            raise ValidationError(f"{path}:{lineno}: event must be 0 or 1, got {ev!r}")
        g = grouped.setdefault(ep, ([], [], []))
        g[0].append(r["patient_id"].strip())
        g[1].append(t)
        g[2].append(ev == "1")
    tables = {ep: SurvivalTable(p, t, e, ep) for ep, (p, t, e) in grouped.items()}
    if endpoint is not None:
        endpoint = normalize_endpoint(endpoint)
        if endpoint not in tables:
            raise ValidationError(f"{path}: no rows for endpoint {endpoint}")
        return tables[endpoint]
    return tables


def write_survival(tables, path):
    rows = []
    for tab in tables:
        for p, t, e in zip(tab.patient_ids, tab.time, tab.event):
            rows.append([p, repr(float(t)), "1" if e else "0", tab.endpoint])
    write_tsv(path, ["patient_id", "time_months", "event", "endpoint"], rows)


# --------------------------------------------------------------------------
# tiles


@dataclass(frozen=True)
class TileRecord:
    tile_id: str
    slide_id: str
    row: int
    col: int
    tissue_fraction: float
    path: str = None

    def __post_init__(self):
        if not (0.0 <= self.tissue_fraction <= 1.0):
            raise ValidationError(
                f"tile {self.tile_id!r}: tissue_fraction {self.tissue_fraction} outside [0, 1]"
            )


def validate_tiles(tiles, manifest=None):
    seen_ids, seen_pos = set(), set()
    known = set(manifest.slide_ids) if manifest is not None else None
    for t in tiles:
        if t.tile_id in seen_ids:
            raise ValidationError(f"duplicate tile_id {t.tile_id!r}")
        seen_ids.add(t.tile_id)
        pos = (t.slide_id, t.row, t.col)
        if pos in seen_pos:
            raise ValidationError(f"duplicate tile position {pos}")
        seen_pos.add(pos)
        if known is not None and t.slide_id not in known:
            raise ReferentialError(f"tile {t.tile_id!r} references unknown slide {t.slide_id!r}")
    return tiles


def load_tile_records(path, manifest=None):
    _, rows = read_tsv(path, ("tile_id", "slide_id", "row", "col", "tissue_fraction"))
    tiles = []
    for lineno, r in enumerate(rows, start=2):
        try:
            tiles.append(
                TileRecord(
                    r["tile_id"],
                    r["slide_id"],
                    int(r["row"]),
                    int(r["col"]),
                    float(r["tissue_fraction"]),
                    r.get("path") or None,
                )
            )
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}")
    return validate_tiles(tiles, manifest)


def write_tile_records(tiles, path):
    with_path = any(t.path for t in tiles)
    header = ["tile_id", "slide_id", "row", "col", "tissue_fraction"] + (["path"] if with_path else [])
    rows = []
    for t in tiles:
        row = [t.tile_id, t.slide_id, str(t.row), str(t.col), repr(float(t.tissue_fraction))]
        if with_path:
            row.append(t.path or "")
        rows.append(row)
    write_tsv(path, header, rows)


# --------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingMatrix:
    tile_ids: list
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValidationError("embedding data must be a 2-D matrix")
        if self.data.shape[0] != len(self.tile_ids):
            raise ValidationError(
                f"{self.data.shape[0]} embedding rows for {len(self.tile_ids)} tile ids"
            )
        if self.data.shape[1] < 1:
            raise ValidationError("embedding dimension must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("embedding contains NaN or Inf")

    @property
    def dim(self):
        return self.data.shape[1]

    def __len__(self):
        return len(self.tile_ids)

    def take(self, idx):
        idx = np.asarray(idx, dtype=int)
        return EmbeddingMatrix([self.tile_ids[i] for i in idx], self.data[idx])

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            list(self.tile_ids) == list(other.tile_ids)
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


def encode_embeddings(emb):
    data = np.ascontiguousarray(emb.data, dtype="<f4")
    n, d = data.shape
    parts = [_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, n, d), data.tobytes()]
    for tid in emb.tile_ids:
        raw = str(tid).encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def decode_embeddings(buf, source="<bytes>"):
    if len(buf) < _HEADER.size:
        raise ParseError(f"{source}: truncated header")
    magic, version, n, d = _HEADER.unpack_from(buf, 0)
    if magic != EMBEDDING_MAGIC:
        raise ParseError(f"{source}: bad magic {magic!r}")
    if version != EMBEDDING_VERSION:
        raise ParseError(f"{source}: unsupported version {version}")
    off = _HEADER.size
    nbytes = n * d * 4
    if len(buf) < off + nbytes:
        raise ParseError(f"{source}: truncated payload ({len(buf) - off} of {nbytes} bytes)")
    data = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float32)
    off += nbytes
    ids = []
    mv = memoryview(buf)
    for i in range(n):
        if off + 4 > len(buf):
            raise ParseError(f"{source}: truncated tile id table at entry {i}")
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + ln > len(buf):
            raise ParseError(f"{source}: truncated tile id table at entry {i}")
        ids.append(bytes(mv[off:off + ln]).decode("utf-8"))
        off += ln
    if off != len(buf):
        raise ParseError(f"{source}: {len(buf) - off} trailing bytes")
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{source}: embedding contains NaN or Inf")
    return EmbeddingMatrix(ids, data)


def save_embeddings(emb, path):
    with open(path, "wb") as fh:
        fh.write(encode_embeddings(emb))


def load_embeddings(path, expected_dim=None, tiles=None):
    """Read a ``PRLE`` file.

    ``expected_dim`` and ``tiles`` (TileRecords) add dimension and
    referential checks against what the cohort declares.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    emb = decode_embeddings(buf, source=str(path))
    if expected_dim is not None and emb.dim != expected_dim:
        raise ValidationError(f"{path}: embedding dim {emb.dim}, expected {expected_dim}")
    if tiles is not None:
        known = {t.tile_id for t in tiles}
        unknown = [t for t in emb.tile_ids if t not in known]
        if unknown:
            raise ReferentialError(f"{path}: {len(unknown)} tile ids not in tile records, e.g. {unknown[0]!r}")
    return emb


# --------------------------------------------------------------------------
# external annotations


@dataclass
class CellCounts:
    tile_ids: list
    counts: np.ndarray  # N x len(CELL_TYPES), non-negative ints

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (len(self.tile_ids), len(CELL_TYPES)):
            raise ValidationError("cell count table has the wrong shape")
        if np.any(self.counts < 0):
            raise ValidationError("cell counts must be non-negative")


@dataclass
class SignatureTable:
    patient_ids: list
    names: list
    values: np.ndarray  # patients x signatures


@dataclass
class GrowthPatterns:
    tile_ids: list
    patterns: list = field(default_factory=list)


def _check_known(ids, known, what):
    if known is None:
        return
    unknown = [i for i in ids if i not in known]
    if unknown:
        raise ReferentialError(f"{len(unknown)} {what} id(s) not in the cohort, e.g. {unknown[0]!r}")


def load_cell_counts(path, tile_ids=None):
    _, rows = read_tsv(path, ("tile_id",) + CELL_TYPES)
    ids, counts = [], []
    for lineno, r in enumerate(rows, start=2):
        try:
            counts.append([int(r[c]) for c in CELL_TYPES])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-integer cell count")
        ids.append(r["tile_id"])
    _check_known(ids, set(tile_ids) if tile_ids is not None else None, "tile")
    return CellCounts(ids, np.array(counts, dtype=np.int64).reshape(-1, len(CELL_TYPES)))


def write_cell_counts(cc, path):
    rows = [[t] + [str(int(v)) for v in row] for t, row in zip(cc.tile_ids, cc.counts)]
    write_tsv(path, ["tile_id", *CELL_TYPES], rows)


def load_signatures(path, patient_ids=None):
    header, rows = read_tsv(path, ("patient_id",))
    names = [c for c in header if c != "patient_id"]
    ids, vals = [], []
    for lineno, r in enumerate(rows, start=2):
        ids.append(r["patient_id"])
        row = []
        for c in names:
            v = r[c].strip()
            try:
                row.append(float(v) if v not in ("", "NA", "nan") else math.nan)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad value {v!r} for {c}")
        vals.append(row)
    _check_known(ids, set(patient_ids) if patient_ids is not None else None, "patient")
    return SignatureTable(ids, names, np.array(vals, dtype=float).reshape(len(ids), len(names)))


def write_signatures(sig, path):
    rows = [[p] + [repr(float(v)) for v in row] for p, row in zip(sig.patient_ids, sig.values)]
    write_tsv(path, ["patient_id", *sig.names], rows)


def load_growth_patterns(path, tile_ids=None):
    _, rows = read_tsv(path, ("tile_id", "pattern"))
    ids, pats = [], []
    for lineno, r in enumerate(rows, start=2):
        p = r["pattern"].strip() or None
        if p is not None and p not in GROWTH_PATTERNS:
            raise ReferentialError(f"{path}:{lineno}: unknown growth pattern {p!r}")
        ids.append(r["tile_id"])
        pats.append(p)
    _check_known(ids, set(tile_ids) if tile_ids is not None else None, "tile")
    return GrowthPatterns(ids, pats)


def write_growth_patterns(gp, path):
    write_tsv(path, ["tile_id", "pattern"], [[t, p or ""] for t, p in zip(gp.tile_ids, gp.patterns)])


def check_referential_closure(manifest, tiles, emb=None):
    """Every embedded tile maps to one slide, every slide to one patient."""
    slides = set(manifest.slide_ids)
    tile_slide = {}
    for t in tiles:
        if t.slide_id not in slides:
            raise ReferentialError(f"tile {t.tile_id!r} references unknown slide {t.slide_id!r}")
        tile_slide[t.tile_id] = t.slide_id
    if emb is not None:
        missing = [tid for tid in emb.tile_ids if tid not in tile_slide]
        if missing:
            raise ReferentialError(f"{len(missing)} embedded tiles have no tile record, e.g. {missing[0]!r}")
    return tile_slide
