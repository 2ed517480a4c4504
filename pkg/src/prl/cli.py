"""``prl`` command line.

Failures exit nonzero and print one JSON record per error on stderr.
"""

import csv
import functools
import json
import logging
import os
import sys

import click
import numpy as np

from . import ssl as ssl_core
from .composition import clr_features, compose_table, default_delta, write_composition_tsv
from .enrichment import cluster_characterize, write_characterization
from .errors import ArtifactError, PRLError
from .ingest import (
    EmbeddingMatrix,
    check_referential_closure,
    load_cell_counts,
    load_embeddings,
    load_growth_patterns,
    load_manifest,
    load_signatures,
    load_survival,
    load_tile_records,
    save_embeddings,
    write_tile_records,
)
from .phenotype import ARTIFACT, assign_clusters
from .pipeline import (
    SyntheticCohortSpec,
    emit_reports,
    generate_synthetic_cohort,
    load_cohort_dir,
    load_config,
    run_classification,
    run_survival,
    write_cohort,
)
from .pipeline.runs import fit_cluster_model
from .store import load_artifact, persist_artifact
from .tiles import TissueRule, default_stain_reference, filter_tissue, load_raster, tile_image, write_tiles

log = logging.getLogger("prl")


def _emit_error(record):
    click.echo(json.dumps(record, sort_keys=True), err=True)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PRLError as exc:
            _emit_error(exc.to_record())
            sys.exit(2)
        except (OSError, ValueError) as exc:
            _emit_error({"error": type(exc).__name__, "message": str(exc)})
            sys.exit(2)

    return wrapper


class Ctx:
    def __init__(self, config, seed, out_dir):
        self.cfg = load_config(config)
        if seed is not None:
            self.cfg.cv.seed = seed
        self.seed = self.cfg.cv.seed
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)

    def path(self, *parts):
        return os.path.join(self.out_dir, *parts)


pass_ctx = click.make_pass_decorator(Ctx)


@click.group()
@click.option("--config", type=click.Path(dir_okay=False), default=None, help="INI run configuration.")
@click.option("--seed", type=int, default=None, help="Overrides [cv] seed.")
@click.option("--out-dir", type=click.Path(file_okay=False), default="prl_out", show_default=True)
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config, seed, out_dir, verbose):
    """Phenotype representation learning pipeline."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx.obj = Ctx(config, seed, out_dir)
    except PRLError as exc:
        _emit_error(exc.to_record())
        sys.exit(2)


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", default=None, help="Comma-separated closed label set.")
@click.option("--tiles", type=click.Path(exists=True, dir_okay=False))
@click.option("--embeddings", type=click.Path(exists=True, dir_okay=False))
@click.option("--survival", type=click.Path(exists=True, dir_okay=False))
@click.option("--cell-counts", type=click.Path(exists=True, dir_okay=False))
@click.option("--signatures", type=click.Path(exists=True, dir_okay=False))
@click.option("--growth-patterns", type=click.Path(exists=True, dir_okay=False))
@pass_ctx
@handle_errors
def ingest(ctx, manifest, labels, tiles, embeddings, survival, cell_counts, signatures, growth_patterns):
    """Validate cohort inputs and store them with checksums."""
    label_set = labels.split(",") if labels else None
    man = load_manifest(manifest, labels=label_set)
    report = {"cohort_id": man.cohort_id, "slides": len(man), "patients": len(man.patients), "institutions": len(man.institutions)}
    tile_recs = load_tile_records(tiles, man) if tiles else None
    emb = None
    if embeddings:
        emb = load_embeddings(embeddings, tiles=tile_recs)
        report["checksums"] = {"embeddings": persist_artifact(emb, ctx.path("embeddings.prle"))}
        report["embedding_dim"] = emb.dim
    if tile_recs is not None:
        check_referential_closure(man, tile_recs, emb)
        report["tiles"] = len(tile_recs)
    tile_ids = emb.tile_ids if emb is not None else ([t.tile_id for t in tile_recs] if tile_recs else None)
    if survival:
        tabs = load_survival(survival)
        report["survival"] = {ep: {"patients": len(t.patient_ids), "events": int(t.event.sum())} for ep, t in tabs.items()}
    if cell_counts:
        report["cell_counts"] = len(load_cell_counts(cell_counts, tile_ids).tile_ids)
    if signatures:
        report["signatures"] = load_signatures(signatures, man.patients).names
    if growth_patterns:
        report["growth_patterns"] = len(load_growth_patterns(growth_patterns, tile_ids).tile_ids)
    persist_artifact(report, ctx.path("ingest.json"))
    click.echo(json.dumps(report, sort_keys=True))


@main.command()
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mpp", required=True, type=float, help="Microns per pixel of the input image.")
@click.option("--slide-id", default="slide", show_default=True)
@click.option("--tile-px", default=224, show_default=True)
@click.option("--target-mpp", default=2.016, show_default=True)
@click.option("--min-tissue", default=0.60, show_default=True)
@click.option("--normalize/--no-normalize", default=True, show_default=True)
@pass_ctx
@handle_errors
def tile(ctx, image, mpp, slide_id, tile_px, target_mpp, min_tissue, normalize):
    """Tile a raster image, keep tissue tiles and stain-normalize them."""
    img = load_raster(image, mpp)
    tiles = filter_tissue(tile_image(img, slide_id, tile_px, target_mpp, TissueRule()), min_tissue)
    records = write_tiles(tiles, ctx.path("tiles"), normalize=default_stain_reference() if normalize else None)
    write_tile_records(records, ctx.path("tiles.tsv"))
    click.echo(json.dumps({"slide_id": slide_id, "tiles_kept": len(records)}))


@main.command("ssl-check")
@click.option("--instances", default=20, show_default=True)
@pass_ctx
@handle_errors
def ssl_check(ctx, instances):
    """Finite-difference gradient and invariance checks of the redundancy-reduction loss."""
    rng = np.random.default_rng(ctx.seed)
    cfg = ssl_core.BtLossConfig()
    worst = 0.0
    for _ in range(instances):
        n, d = int(rng.integers(8, 17)), int(rng.integers(2, 7))
        A, B = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        _, dA, dB = ssl_core.bt_loss_and_gradient(A, B, cfg)
        h = 1e-6
        for M, G in ((A, dA), (B, dB)):
            for idx in np.ndindex(*M.shape):
                M[idx] += h
                up = ssl_core.bt_loss_and_gradient(A, B, cfg)[0]
                M[idx] -= 2 * h
                down = ssl_core.bt_loss_and_gradient(A, B, cfg)[0]
                M[idx] += h
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(fd - G[idx]) / max(1.0, abs(fd), abs(G[idx])))
    scale = float(np.exp(rng.normal()))
    A = rng.normal(size=(32, 4))
    B = A + 0.1 * rng.normal(size=A.shape)
    l0 = ssl_core.barlow_twins_loss(ssl_core.cross_correlation(A, B), cfg)[0]
    l1 = ssl_core.barlow_twins_loss(ssl_core.cross_correlation(scale * A, B), cfg)[0]
    checks = {
        "gradient_max_rel_error": float(worst),
        "gradient_ok": bool(worst < 1e-4),
        "scale_invariance_abs_diff": float(abs(l0 - l1)),
        "scale_invariance_ok": bool(abs(l0 - l1) < 1e-9),
    }
    click.echo(json.dumps(checks, sort_keys=True))
    if not (checks["gradient_ok"] and checks["scale_invariance_ok"]):
        _emit_error({"error": "check_failed", "message": "loss checks failed", **checks})
        sys.exit(1)


@main.command("ssl-train-toy")
@click.option("--epochs", default=200, show_default=True)
@click.option("--batch-size", default=64, show_default=True)
@click.option("--lambda", "lambda_", default=0.005, show_default=True)
@click.option("--lr", default=0.2, show_default=True)
@pass_ctx
@handle_errors
def ssl_train_toy(ctx, epochs, batch_size, lambda_, lr):
    """Train the desk-scale encoder on planted-factor vectors."""
    data = ssl_core.planted_factor_data(seed=ctx.seed)
    spec = ssl_core.DistortionSpec(noise_std=0.3, brightness=0.1, seed=ctx.seed)
    res = ssl_core.train_toy_encoder(
        data, spec, ssl_core.BtLossConfig(lambda_=lambda_), epochs=epochs, batch_size=batch_size, lr=lr, seed=ctx.seed
    )
    with open(ctx.path("loss_trace.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        writer.writerows([i, repr(float(v))] for i, v in enumerate(res.loss_trace))
    Z = res.encoder.project(data)
    emb = EmbeddingMatrix([f"v{i}" for i in range(Z.shape[0])], Z.astype(np.float32))
    save_embeddings(emb, ctx.path("embeddings.prle"))
    click.echo(json.dumps({"initial_loss": res.loss_trace[0], "final_loss": res.loss_trace[-1], "steps": len(res.loss_trace)}))


@main.command()
@click.option("--data-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--k", type=int, default=None)
@click.option("--gamma", type=float, default=None)
@click.option("--sample", type=int, default=None)
@click.option("--two-pass/--single-pass", default=None)
@pass_ctx
@handle_errors
def cluster(ctx, data_dir, k, gamma, sample, two_pass):
    """Leiden clustering of a cohort's tiles; writes a Partition TSV and a ClusterModel."""
    cfg = ctx.cfg
    for name, value in (("k", k), ("gamma", gamma), ("sample", sample), ("two_pass", two_pass)):
        if value is not None:
            setattr(cfg.cluster, name, value)
    data = load_cohort_dir(data_dir)
    model, P, _ = fit_cluster_model(data, data.slide_ids, cfg, ctx.seed)
    sums = {
        "partition": persist_artifact(P, ctx.path("partition.tsv")),
        "cluster_model": persist_artifact(model, ctx.path("cluster_model.prlm")),
    }
    click.echo(json.dumps({"n_clusters": P.n_clusters, "n_tiles": int(P.labels.size), "checksums": sums}, sort_keys=True))


@main.command()
@click.option("--data-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--level", type=click.Choice(["slide", "patient"]), default="slide", show_default=True)
@pass_ctx
@handle_errors
def compose(ctx, data_dir, model_path, level):
    """Assign tiles to a ClusterModel and write composition and CLR tables."""
    data = load_cohort_dir(data_dir)
    model = load_artifact(model_path)
    labels = assign_clusters(model, data.embeddings)
    owner = data.tile_slide if level == "slide" else data.tile_patient
    owners = data.slide_ids if level == "slide" else data.manifest.patients
    table = compose_table(labels, owner, model.n_clusters, owners)
    delta = ctx.cfg.delta_value() or default_delta(table.W)
    clr = type(table)(table.owner_ids, clr_features(table.W, delta), table.cluster_ids)
    persist_artifact(table, ctx.path("composition.tsv"))
    write_composition_tsv(clr, ctx.path("clr.tsv"))
    click.echo(json.dumps({"owners": len(table.owner_ids), "delta": delta, "artifact_tiles": int((labels == ARTIFACT).sum())}))


@main.command()
@click.option("--data-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--jobs", default=1, show_default=True, help="Folds run in parallel processes.")
@pass_ctx
@handle_errors
def classify(ctx, data_dir, jobs):
    """Institution-disjoint cross-validated subtype classification."""
    summary = run_classification(load_cohort_dir(data_dir), ctx.cfg, ctx.out_dir, jobs=jobs)
    click.echo(json.dumps({"mean_auc": summary["mean_auc"], "summary_hash": summary["summary_hash"]}, sort_keys=True))


@main.command()
@click.option("--data-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--endpoint", type=click.Choice(["os", "rfs"]), default="os", show_default=True)
@click.option("--jobs", default=1, show_default=True)
@pass_ctx
@handle_errors
def survival(ctx, data_dir, endpoint, jobs):
    """Patient-level cross-validated Cox regression."""
    summary = run_survival(load_cohort_dir(data_dir), ctx.cfg, ctx.out_dir, endpoint, jobs=jobs)
    click.echo(
        json.dumps(
            {
                "mean_cindex": summary["mean_cindex"],
                "logrank_p": summary["logrank_p_pooled_test"],
                "summary_hash": summary["summary_hash"],
            },
            sort_keys=True,
        )
    )


@main.command()
@click.option("--data-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@pass_ctx
@handle_errors
def characterize(ctx, data_dir, model_path):
    """Correlate clusters with signatures, cell counts and growth patterns."""
    cc = ctx.cfg.characterize
    data = load_cohort_dir(data_dir)
    model = load_artifact(model_path)
    labels = assign_clusters(model, data.embeddings)
    table = compose_table(labels, data.tile_patient, model.n_clusters, data.manifest.patients)
    if data.signatures is None and data.cell_counts is None and data.growth_patterns is None:
        raise ArtifactError(f"{data_dir}: no annotation tables to characterize against")
    ch = cluster_characterize(
        data.embeddings.tile_ids,
        labels,
        model.n_clusters,
        compositions=table,
        signatures=data.signatures,
        cell_counts=data.cell_counts,
        growth_patterns=data.growth_patterns,
        alpha=cc.alpha,
        exclude_cluster_from_population=cc.exclude_self,
        min_coverage=cc.min_coverage,
    )
    write_characterization(ch, ctx.path("characterization.tsv"), cc.alpha)
    click.echo(json.dumps({"clusters": len(ch.cluster_ids), "columns": len(ch.columns)}))


def _effects(text):
    out = {}
    for part in filter(None, (text or "").split(",")):
        c, _, v = part.partition(":")
        out[int(c)] = float(v)
    return out


@main.command()
@click.option("--patients", default=200, show_default=True)
@click.option("--tiles-per-slide", default=500, show_default=True)
@click.option("--clusters", default=20, show_default=True)
@click.option("--dim", default=16, show_default=True)
@click.option("--subtype-effects", default="0:3.0,1:-3.0", show_default=True, help="cluster:effect pairs.")
@click.option("--hazard-effects", default="2:1.0", show_default=True, help="cluster:log-HR pairs.")
@click.option("--censoring", default=0.3, show_default=True)
@click.option("--separation", default=8.0, show_default=True)
@click.option("--institutions", default=10, show_default=True)
@click.option("--external-patients", default=0, show_default=True)
@click.option("--null", "null", is_flag=True, help="Drop every planted effect.")
@pass_ctx
@handle_errors
def synth(ctx, patients, tiles_per_slide, clusters, dim, subtype_effects, hazard_effects, censoring, separation, institutions, external_patients, null):
    """Generate a planted synthetic cohort directory."""
    spec = SyntheticCohortSpec(
        n_patients=patients,
        tiles_per_slide=tiles_per_slide,
        n_clusters=clusters,
        dim=dim,
        subtype_effects={} if null else _effects(subtype_effects),
        hazard_effects={} if null else _effects(hazard_effects),
        censoring_rate=censoring,
        separation=separation,
        n_institutions=institutions,
        n_external_patients=external_patients,
        seed=ctx.seed,
    )
    write_cohort(generate_synthetic_cohort(spec), ctx.out_dir)
    click.echo(json.dumps({"out_dir": ctx.out_dir, "patients": patients, "seed": ctx.seed}))


@main.command()
@click.option("--run", "run_name", default=None, help="Run sub-directory; default: every run found.")
@pass_ctx
@handle_errors
def report(ctx, run_name):
    """Rebuild tables, figures and summaries of completed runs."""
    names = [run_name] if run_name else sorted(
        d for d in os.listdir(ctx.out_dir) if os.path.exists(ctx.path(d, "run.json"))
    )
    if not names:
        raise ArtifactError(f"{ctx.out_dir}: no completed runs")
    hashes = {n: emit_reports(ctx.path(n))["summary_hash"] for n in names}
    click.echo(json.dumps(hashes, sort_keys=True))


if __name__ == "__main__":
    main()
