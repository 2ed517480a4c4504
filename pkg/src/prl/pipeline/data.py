"""Loading a cohort directory into aligned in-memory tables."""

import os
from dataclasses import dataclass

import numpy as np

from ..errors import ArtifactError, ReferentialError
from ..ingest import (
    check_referential_closure,
    load_cell_counts,
    load_embeddings,
    load_growth_patterns,
    load_manifest,
    load_signatures,
    load_survival,
    load_tile_records,
)
from . import synth


@dataclass
class CohortData:
    manifest: object
    tiles: list
    embeddings: object
    survival: dict
    cell_counts: object = None
    signatures: object = None
    growth_patterns: object = None
    external: "CohortData" = None

    def __post_init__(self):
        tile_slide = check_referential_closure(self.manifest, self.tiles, self.embeddings)
        tissue = {t.tile_id: t.tissue_fraction for t in self.tiles}
        slide_patient = self.manifest.slide_to_patient()
        self.tile_slide = np.array([tile_slide[t] for t in self.embeddings.tile_ids], dtype=object)
        self.tile_patient = np.array([slide_patient[s] for s in self.tile_slide], dtype=object)
        self.tissue = np.array([tissue[t] for t in self.embeddings.tile_ids], dtype=float)
        embedded = set(self.tile_slide)
        empty = [s for s in self.manifest.slide_ids if s not in embedded]
        if empty:
            raise ReferentialError(f"{len(empty)} slide(s) have no embedded tiles, e.g. {empty[0]!r}")

    @property
    def slide_ids(self):
        return self.manifest.slide_ids

    def rows_for_slides(self, slides):
        keep = set(slides)
        return np.flatnonzero(np.fromiter((s in keep for s in self.tile_slide), bool, self.tile_slide.size))


def _opt(path, loader, *args):
    return loader(path, *args) if os.path.exists(path) else None


def load_cohort_dir(path, labels=None, require_embeddings=True):
    """Read the standard layout written by ``prl synth`` (external/ optional)."""
    p = lambda name: os.path.join(path, name)  # noqa: E731
    for name in (synth.MANIFEST, synth.TILES) + ((synth.EMBEDDINGS,) if require_embeddings else ()):
        if not os.path.exists(p(name)):
            raise ArtifactError(f"{path}: missing {name}")
    manifest = load_manifest(p(synth.MANIFEST), labels=labels, cohort_id=os.path.basename(os.path.normpath(path)))
    tiles = load_tile_records(p(synth.TILES), manifest)
    emb = load_embeddings(p(synth.EMBEDDINGS), tiles=tiles)
    survival = _opt(p(synth.SURVIVAL), load_survival) or {}
    tile_ids = emb.tile_ids
    data = CohortData(
        manifest,
        tiles,
        emb,
        survival,
        cell_counts=_opt(p(synth.CELL_COUNTS), load_cell_counts, tile_ids),
        signatures=_opt(p(synth.SIGNATURES), load_signatures, manifest.patients),
        growth_patterns=_opt(p(synth.GROWTH), load_growth_patterns, tile_ids),
    )
    if os.path.isdir(p(synth.EXTERNAL)):
        data.external = load_cohort_dir(p(synth.EXTERNAL), labels=labels)
    return data


def cohort_from_synthetic(cohort):
    """In-memory CohortData from a generated SyntheticCohort (skips disk)."""
    ext = cohort_from_synthetic(cohort.external) if cohort.external is not None else None
    gp = cohort.growth_patterns
    keep = [i for i, v in enumerate(gp.patterns) if v]
    gp = type(gp)([gp.tile_ids[i] for i in keep], [gp.patterns[i] for i in keep])
    return CohortData(
        cohort.manifest,
        cohort.tiles,
        cohort.embeddings,
        cohort.survival,
        cohort.cell_counts,
        cohort.signatures,
        gp,
        ext,
    )
