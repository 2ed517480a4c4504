"""Planted synthetic cohorts for end-to-end self-validation.

Tiles are drawn from a Gaussian mixture with one component per phenotype
cluster plus one low-tissue background component.  Slide compositions come
from class-specific Dirichlet priors; survival times from exponential
hazards driven by the CLR coordinates of the true compositions.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from ..composition import clr_transform
from ..errors import ValidationError
from ..ingest import (
    CELL_TYPES,
    GROWTH_PATTERNS,
    CellCounts,
    CohortManifest,
    EmbeddingMatrix,
    GrowthPatterns,
    SignatureTable,
    SlideEntry,
    SurvivalTable,
    TileRecord,
    save_embeddings,
    write_cell_counts,
    write_growth_patterns,
    write_manifest,
    write_signatures,
    write_survival,
    write_tile_records,
    write_tsv,
)

LABELS = ("LUAD", "LUSC")
BACKGROUND = -1
_CELL_BASE = np.array([20.0, 8.0, 5.0, 1.0])


@dataclass
class SyntheticCohortSpec:
    """Generative parameters.

    subtype_effects : {cluster: e}
        Dirichlet concentration of the cluster is ``concentration * exp(+e/2)``
        for LUSC slides and ``concentration * exp(-e/2)`` for LUAD slides.
    hazard_effects : {cluster: beta}
        Log-hazard ratio per unit of the cluster's CLR coordinate.
    separation : float
        Minimum distance between mixture centres in units of the
        within-component standard deviation.
    """

    n_patients: int = 200
    tiles_per_slide: int = 500
    n_clusters: int = 20
    dim: int = 16
    subtype_effects: dict = field(default_factory=lambda: {0: 3.0, 1: -3.0})
    hazard_effects: dict = field(default_factory=lambda: {2: 1.0})
    censoring_rate: float = 0.3
    separation: float = 8.0
    concentration: float = 1.0
    n_institutions: int = 10
    artifact_fraction: float = 0.05
    base_hazard_os: float = 1.0 / 36.0
    base_hazard_rfs: float = 1.0 / 24.0
    multi_slide_fraction: float = 0.0
    inflammatory_clusters: tuple = (3,)
    solid_clusters: tuple = (4,)
    signature_drivers: dict = field(default_factory=lambda: {"immune_infiltration": 3, "tgf_beta": 5})
    growth_fraction: float = 0.35
    n_external_patients: int = 0
    external_shift: float = 0.0
    seed: int = 0

    def validate(self):
        C = self.n_clusters
        for what, ids in (
            ("subtype effect", self.subtype_effects),
            ("hazard effect", self.hazard_effects),
            ("inflammatory cluster", self.inflammatory_clusters),
            ("solid cluster", self.solid_clusters),
            ("signature driver", list(self.signature_drivers.values())),
        ):
            bad = [c for c in ids if not (isinstance(c, (int, np.integer)) and 0 <= c < C)]
            if bad:
                raise ValidationError(f"{what} references nonexistent cluster(s) {bad}; valid ids are 0..{C - 1}")
        if not 0.0 <= self.censoring_rate < 1.0:
            raise ValidationError("censoring_rate must lie in [0, 1)")
        if not 0.0 <= self.artifact_fraction < 1.0:
            raise ValidationError("artifact_fraction must lie in [0, 1)")
        if min(self.n_patients, self.tiles_per_slide, C, self.dim, self.n_institutions) < 1:
            raise ValidationError("sizes must be positive")
        if self.n_patients < 2:
            raise ValidationError("at least two patients are needed for two classes")
        if self.n_institutions > self.n_patients:
            raise ValidationError("more institutions than patients")
        if self.separation <= 0 or self.concentration <= 0:
            raise ValidationError("separation and concentration must be positive")
        return self

    def to_dict(self):
        d = asdict(self)
        d["subtype_effects"] = {str(k): v for k, v in self.subtype_effects.items()}
        d["hazard_effects"] = {str(k): v for k, v in self.hazard_effects.items()}
        d["inflammatory_clusters"] = list(self.inflammatory_clusters)
        d["solid_clusters"] = list(self.solid_clusters)
        return d


@dataclass
class SyntheticCohort:
    manifest: CohortManifest
    tiles: list
    embeddings: EmbeddingMatrix
    survival: dict  # endpoint -> SurvivalTable
    cell_counts: CellCounts
    signatures: SignatureTable
    growth_patterns: GrowthPatterns
    tile_component: np.ndarray  # planted component per tile, -1 = background
    patient_w: np.ndarray  # true patient compositions
    truth: dict
    external: "SyntheticCohort" = None


def mixture_centres(n, dim, separation, rng):
    """``n + 1`` centres (last one is background) with minimum pairwise distance ``separation``."""
    X = rng.normal(size=(n + 1, dim))
    if n == 0:
        return X * separation
    d = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    dmin = d[np.triu_indices(n + 1, 1)].min()
    return X * (separation / dmin)


def _censoring_hazard(rates, target):
    if target <= 0:
        return 0.0

    def excess(mu):
        return float(np.mean(mu / (rates + mu))) - target

    hi = rates.max()
    while excess(hi) < 0:
        hi *= 2
    return float(optimize.brentq(excess, 0.0, hi, xtol=1e-14, rtol=1e-12))


def _survival(rng, lin, base, censoring_rate, pids, endpoint):
    rates = base * np.exp(lin)
    t_event = rng.exponential(1.0 / rates)
    mu = _censoring_hazard(rates, censoring_rate)
    t_cens = rng.exponential(1.0 / mu, size=rates.size) if mu > 0 else np.full(rates.size, np.inf)
    event = t_event <= t_cens
    time = np.minimum(t_event, t_cens)
    return SurvivalTable(list(pids), time, event, endpoint), mu


def _institution_sizes(rng, n_patients, n_inst):
    w = rng.dirichlet(np.full(n_inst, 3.0))
    counts = np.ones(n_inst, dtype=np.int64)
    counts += rng.multinomial(n_patients - n_inst, w)
    return counts


def _generate(spec, rng, centres, cell_mult, growth_probs, prefix, institutions):
    C, D = spec.n_clusters, spec.dim
    P = spec.n_patients
    labels = np.array([0] * (P // 2) + [1] * (P - P // 2))
    rng.shuffle(labels)
    pids = [f"{prefix}P{i:04d}" for i in range(P)]
    inst = np.repeat(np.arange(len(institutions)), _institution_sizes(rng, P, len(institutions)))
    rng.shuffle(inst)

    alpha = np.full((2, C), spec.concentration)
    for c, e in spec.subtype_effects.items():
        alpha[1, c] *= np.exp(0.5 * e)
        alpha[0, c] *= np.exp(-0.5 * e)
    W = np.array([rng.dirichlet(alpha[y]) for y in labels])
    # floor at half a tile so the CLR matches what tile counts can resolve
    floor = 0.5 / max(spec.tiles_per_slide, 1)
    Wf = np.maximum(W, floor)
    Z = clr_transform(Wf / Wf.sum(axis=1, keepdims=True))
    Zc = Z - Z.mean(axis=0)
    lin = np.zeros(P)
    for c, b in spec.hazard_effects.items():
        lin += b * Zc[:, c]

    slides, tiles, comp, emb_rows, tile_ids = [], [], [], [], []
    n_art = int(round(spec.artifact_fraction * spec.tiles_per_slide))
    n_real = spec.tiles_per_slide - n_art
    for i, p in enumerate(pids):
        n_slides = 2 if rng.random() < spec.multi_slide_fraction else 1
        for s in range(n_slides):
            sid = f"{p}-S{s}"
            slides.append(SlideEntry(sid, p, institutions[inst[i]], LABELS[labels[i]]))
            counts = rng.multinomial(n_real, W[i])
            k = np.r_[np.repeat(np.arange(C), counts), np.full(n_art, BACKGROUND)]
            rng.shuffle(k)
            x = centres[k] + rng.normal(size=(k.size, D))
            tissue = np.where(k == BACKGROUND, rng.uniform(0.05, 0.25, k.size), rng.uniform(0.6, 1.0, k.size))
            side = int(np.ceil(np.sqrt(k.size)))
            for j in range(k.size):
                tid = f"{sid}_t{j:04d}"
                tile_ids.append(tid)
                tiles.append(TileRecord(tid, sid, j // side, j % side, float(tissue[j])))
            comp.append(k)
            emb_rows.append(x)
    comp = np.concatenate(comp)
    data = np.concatenate(emb_rows).astype(np.float32)
    manifest = CohortManifest(prefix + "cohort", slides, LABELS)

    os_tab, mu_os = _survival(rng, lin, spec.base_hazard_os, spec.censoring_rate, pids, "overall_survival")
    rfs_tab, mu_rfs = _survival(rng, lin, spec.base_hazard_rfs, spec.censoring_rate, pids, "recurrence_free")

    mult = cell_mult[np.where(comp == BACKGROUND, C, comp)]
    cells = rng.poisson(_CELL_BASE * mult)

    sig_names = list(spec.signature_drivers) + ["null_signature"]
    sig = np.column_stack(
        [Zc[:, c] + rng.normal(scale=0.5, size=P) for c in spec.signature_drivers.values()] + [rng.normal(size=P)]
    )

    annotated_slides = {s.slide_id for s in slides if rng.random() < spec.growth_fraction}
    patterns = []
    for t, k in zip(tiles, comp):
        if t.slide_id in annotated_slides and k != BACKGROUND:
            patterns.append(GROWTH_PATTERNS[rng.choice(len(GROWTH_PATTERNS), p=growth_probs[k])])
        else:
            patterns.append(None)

    truth = {
        "labels": {p: LABELS[y] for p, y in zip(pids, labels)},
        "true_linear_predictor": {p: float(v) for p, v in zip(pids, lin)},
        "censoring_hazard": {"overall_survival": mu_os, "recurrence_free": mu_rfs},
    }
    return SyntheticCohort(
        manifest=manifest,
        tiles=tiles,
        embeddings=EmbeddingMatrix(tile_ids, data),
        survival={"overall_survival": os_tab, "recurrence_free": rfs_tab},
        cell_counts=CellCounts(tile_ids, cells),
        signatures=SignatureTable(pids, sig_names, sig),
        growth_patterns=GrowthPatterns(tile_ids, patterns),
        tile_component=comp,
        patient_w=W,
        truth=truth,
    )


def generate_synthetic_cohort(spec):
    """Draw a cohort (and optional external cohort) from ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C = spec.n_clusters
    centres = mixture_centres(C, spec.dim, spec.separation, rng)
    # per-component multipliers of the base cell-count means; last row is background
    cell_mult = rng.lognormal(0.0, 0.3, size=(C + 1, len(CELL_TYPES)))
    inflam = CELL_TYPES.index("inflammatory")
    for c in spec.inflammatory_clusters:
        cell_mult[c, inflam] *= 4.0
    cell_mult[C] *= 0.1
    growth_probs = rng.dirichlet(np.full(len(GROWTH_PATTERNS), 2.0), size=C)
    solid = GROWTH_PATTERNS.index("solid")
    for c in spec.solid_clusters:
        growth_probs[c] = 0.05 / (len(GROWTH_PATTERNS) - 1)
        growth_probs[c, solid] = 0.95
    institutions = [f"I{i:02d}" for i in range(spec.n_institutions)]
    cohort = _generate(spec, rng, centres, cell_mult, growth_probs, "", institutions)
    if spec.n_external_patients:
        ext_spec = SyntheticCohortSpec(**{**asdict(spec), "n_patients": spec.n_external_patients, "n_institutions": 1})
        ext = _generate(ext_spec, rng, centres, cell_mult, growth_probs, "X", ["EXT"])
        if spec.external_shift:
            direction = rng.normal(size=spec.dim)
            direction /= np.linalg.norm(direction)
            ext.embeddings.data += np.float32(spec.external_shift) * direction.astype(np.float32)
        cohort.external = ext
    cohort.truth.update(
        {
            "spec": spec.to_dict(),
            "centres": centres.tolist(),
            "background_component": BACKGROUND,
            "cell_count_base": _CELL_BASE.tolist(),
            "cell_count_multipliers": cell_mult.tolist(),
            "growth_pattern_probs": growth_probs.tolist(),
            "planted_subtype_clusters": sorted(spec.subtype_effects),
            "planted_hazard_clusters": sorted(spec.hazard_effects),
        }
    )
    return cohort


# standard file names of a cohort directory
MANIFEST = "manifest.tsv"
TILES = "tiles.tsv"
EMBEDDINGS = "embeddings.prle"
SURVIVAL = "survival.tsv"
CELL_COUNTS = "cell_counts.tsv"
SIGNATURES = "signatures.tsv"
GROWTH = "growth_patterns.tsv"
TRUTH = "ground_truth.json"
TILE_TRUTH = "tile_truth.tsv"
EXTERNAL = "external"


def write_cohort(cohort, out_dir):
    """Write the standard cohort directory layout; byte-identical per seed."""
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(cohort.manifest, os.path.join(out_dir, MANIFEST))
    write_tile_records(cohort.tiles, os.path.join(out_dir, TILES))
    save_embeddings(cohort.embeddings, os.path.join(out_dir, EMBEDDINGS))
    write_survival(list(cohort.survival.values()), os.path.join(out_dir, SURVIVAL))
    write_cell_counts(cohort.cell_counts, os.path.join(out_dir, CELL_COUNTS))
    write_signatures(cohort.signatures, os.path.join(out_dir, SIGNATURES))
    ann = [(t, p) for t, p in zip(cohort.growth_patterns.tile_ids, cohort.growth_patterns.patterns) if p]
    write_growth_patterns(GrowthPatterns([t for t, _ in ann], [p for _, p in ann]), os.path.join(out_dir, GROWTH))
    write_tsv(
        os.path.join(out_dir, TILE_TRUTH),
        ["tile_id", "component"],
        [[t, str(int(k))] for t, k in zip(cohort.embeddings.tile_ids, cohort.tile_component)],
    )
    truth = dict(cohort.truth)
    truth["patient_compositions"] = {
        p: [float(v) for v in w] for p, w in zip(cohort.signatures.patient_ids, cohort.patient_w)
    }
    with open(os.path.join(out_dir, TRUTH), "w", encoding="utf-8") as fh:
        json.dump(truth, fh, sort_keys=True, indent=1)
        fh.write("\n")
    if cohort.external is not None:
        write_cohort(cohort.external, os.path.join(out_dir, EXTERNAL))


def null_spec(**overrides):
    """Spec with every planted effect removed."""
    base = dict(subtype_effects={}, hazard_effects={})
    base.update(overrides)
    return SyntheticCohortSpec(**base)

