"""Cross-validated classification and survival runs with a locked cluster model.

A run directory holds ``run.json``, one ``fold_<f>/`` directory per fold and
a ``locked/`` directory; :func:`prl.pipeline.reports.emit_reports` turns
them into tables, figures and a summary.
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from ..composition import clr_features, compose_table, default_delta
from ..errors import ArtifactError, PRLError, PreconditionError, ValidationError
from ..ingest import normalize_endpoint, read_tsv, write_tsv
from ..phenotype import (
    ArtifactRule,
    assign_clusters,
    cluster_embeddings,
    model_from_two_pass,
    subsample_vectors,
    two_pass_cluster,
)
from ..stats import concordance_index, fit_cox, fit_logistic, logrank_test, roc_auc, split_risk_groups
from ..store import load_artifact, persist_artifact
from .folds import audit_fold_plan, make_folds

log = logging.getLogger(__name__)

CLASSIFY_DIR = "classify"
SURVIVAL_DIR = "survival_{endpoint}"
ENDPOINT_TAGS = {"overall_survival": "os", "recurrence_free": "rfs"}


def feature_names(n_clusters):
    return [f"cluster_{c}" for c in range(n_clusters)]


def fold_seed(seed, fold):
    return int(seed) * 1000 + int(fold)


def _json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _read_json(path):
    if not os.path.exists(path):
        raise ArtifactError(f"{path}: missing")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _with_fold(exc, fold):
    exc.args = (f"fold {fold}: {exc.args[0] if exc.args else exc}",) + tuple(exc.args[1:])
    return exc


# -- clustering on training tiles -------------------------------------------


def fit_cluster_model(data, train_slides, cfg, seed):
    """Leiden on a sample of training tiles; returns ``(model, partition, sampled_rows)``."""
    cc = cfg.cluster
    rows = data.rows_for_slides(train_slides)
    E_train = data.embeddings.take(rows)
    n = min(cc.sample, rows.size)
    if n < rows.size:
        E_s = subsample_vectors(E_train, n, seed)
    else:
        E_s = E_train
    pos = {t: i for i, t in enumerate(data.embeddings.tile_ids)}
    sampled = np.array([pos[t] for t in E_s.tile_ids], dtype=np.int64)
    if cc.two_pass:
        rule = ArtifactRule(min_mean_tissue=cc.min_mean_tissue)
        clean, P = two_pass_cluster(
            E_s, cc.k, cc.gamma, rule, data.tissue[sampled], seed, cc.metric, cc.max_iters, cc.restarts
        )
    else:
        P = cluster_embeddings(E_s, cc.k, cc.gamma, seed, cc.metric, cc.max_iters, cc.restarts)
        clean = E_s
    model = model_from_two_pass(E_s, clean, P, cc.k_assign, cc.metric)
    return model, P, sampled


def tile_clusters(model, data, sampled=None):
    """Labels for every tile of ``data``; sampled training tiles keep their Leiden label."""
    labels = assign_clusters(model, data.embeddings)
    if sampled is not None:
        labels[sampled] = model.labels
    return labels


def _write_tile_labels(path, data, labels, ext_labels=None):
    rows = [[t, str(int(c))] for t, c in zip(data.embeddings.tile_ids, labels)]
    if ext_labels is not None:
        rows += [[t, str(int(c))] for t, c in zip(data.external.embeddings.tile_ids, ext_labels)]
    write_tsv(path, ["tile_id", "cluster"], rows)


def _read_tile_labels(path, data):
    """Labels written by :func:`_write_tile_labels`, checked against ``data``."""
    if not os.path.exists(path):
        raise ArtifactError(f"{path}: missing")
    _, rows = read_tsv(path, ("tile_id", "cluster"))
    lab = {r["tile_id"]: int(r["cluster"]) for r in rows}

    def pick(ids):
        missing = [t for t in ids if t not in lab]
        if missing:
            raise ArtifactError(f"{path}: no cluster label for {len(missing)} tile(s), e.g. {missing[0]!r}")
        return np.array([lab[t] for t in ids], dtype=np.int64)

    ext = pick(data.external.embeddings.tile_ids) if data.external is not None else None
    return pick(data.embeddings.tile_ids), ext


def _features(W_all, train_idx, cfg):
    delta = cfg.delta_value()
    if delta is None:
        delta = default_delta(W_all[train_idx])
    return clr_features(W_all, delta), delta


def _locked_choice(values):
    """Fold whose metric is the median (lower median; ties to the lowest fold id)."""
    order = sorted(range(len(values)), key=lambda f: (values[f], f))
    return order[(len(values) - 1) // 2]


# -- classification -----------------------------------------------------------


def _positive_label(manifest):
    labels = sorted({s.label for s in manifest.slides if s.label is not None})
    if len(labels) != 2:
        raise PreconditionError(f"binary classification needs two labels, found {labels}")
    return labels[1]


def _slide_table(data, labels, n_clusters):
    return compose_table(labels, data.tile_slide, n_clusters, owners=data.slide_ids)


def _classification_fold(data, plan, fold, cfg, out):
    seed = fold_seed(cfg.cv.seed, fold)
    split = {s: "train" for s in plan.slides(fold, "train")}
    split.update({s: "val" for s in plan.slides(fold, "val")})
    split.update({s: "test" for s in plan.slides(fold, "test")})
    model, P, sampled = fit_cluster_model(data, plan.slides(fold, "train"), cfg, seed)
    C = model.n_clusters
    labels = tile_clusters(model, data, sampled)
    ext_labels = tile_clusters(model, data.external) if data.external is not None else None
    table = _slide_table(data, labels, C)
    slides = list(table.owner_ids)
    positive = _positive_label(data.manifest)
    y = np.array([data.manifest.slide(s).label == positive for s in slides])
    splits = np.array([split[s] for s in slides])
    train = splits == "train"
    X, delta = _features(table.W, np.flatnonzero(train), cfg)
    fit = fit_logistic(X[train], y[train], feature_names(C), ridge=cfg.model.ridge, max_iter=cfg.model.max_iter)
    score = fit.linear_predictor(X)
    rows = [[s, sp, str(int(t)), repr(float(v))] for s, sp, t, v in zip(slides, splits, y, score)]
    metrics = {"fold": fold, "seed": seed, "n_clusters": C, "delta": delta, "n_sampled": int(sampled.size)}
    for sp in ("val", "test"):
        m = splits == sp
        metrics[f"auc_{sp}"] = roc_auc(score[m], y[m])[0]
    if data.external is not None:
        ext_table = _slide_table(data.external, ext_labels, C)
        Xe = clr_features(ext_table.W, delta)
        ye = np.array([data.external.manifest.slide(s).label == positive for s in ext_table.owner_ids])
        se = fit.linear_predictor(Xe)
        metrics["auc_external"] = roc_auc(se, ye)[0]
        rows += [[s, "external", str(int(t)), repr(float(v))] for s, t, v in zip(ext_table.owner_ids, ye, se)]
    os.makedirs(out, exist_ok=True)
    persist_artifact(model, os.path.join(out, "cluster_model.prlm"))
    _write_tile_labels(os.path.join(out, "tile_clusters.tsv"), data, labels, ext_labels)
    persist_artifact(table, os.path.join(out, "composition.tsv"))
    persist_artifact(fit, os.path.join(out, "fit.tsv"))
    write_tsv(os.path.join(out, "predictions.tsv"), ["slide_id", "split", "label", "score"], rows)
    _json(os.path.join(out, "metrics.json"), metrics)
    return metrics


def _locked_fits(data, plan, locked_labels, n_clusters, cfg, target_fn, fit_fn, level, out):
    """Refit every fold on ``level`` (slide or patient) compositions from the locked model."""
    if level == "slide":
        table = _slide_table(data, locked_labels, n_clusters)
    else:
        table = _patient_table(data, locked_labels, n_clusters)
    persist_artifact(table, os.path.join(out, "composition.tsv"))
    fits = []
    for f in range(plan.k):
        train_owners = set(plan.slides(f, "train") if level == "slide" else plan.patients(f, "train"))
        train = np.array([o in train_owners for o in table.owner_ids])
        X, _ = _features(table.W, np.flatnonzero(train), cfg)
        try:
            fit = fit_fn(X[train], target_fn(table.owner_ids, train), feature_names(n_clusters))
        except PRLError as exc:
            raise _with_fold(exc, f)
        persist_artifact(fit, os.path.join(out, f"fit_fold{f}.tsv"))
        fits.append(fit)
    return fits


def _run_folds(fn, args_list, jobs):
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(fn, *args) for args in args_list]
            return [f.result() for f in futures]
    return [fn(*args) for args in args_list]


def _fold_task(kind, data, plan, fold, cfg, out, endpoint=None):
    try:
        if kind == "classification":
            return _classification_fold(data, plan, fold, cfg, out)
        return _survival_fold(data, plan, fold, cfg, out, endpoint)
    except PRLError as exc:
        raise _with_fold(exc, fold)


def _write_run_json(run_dir, kind, cfg, plan, endpoint=None):
    os.makedirs(run_dir, exist_ok=True)
    _json(
        os.path.join(run_dir, "run.json"),
        {"kind": kind, "endpoint": endpoint, "folds": plan.k, "config": cfg.to_dict(), "config_hash": cfg.digest()},
    )
    write_tsv(
        os.path.join(run_dir, "folds.tsv"),
        ["fold", "split", "slide_id", "patient_id", "unit"],
        [[str(f), sp, s, p, u] for f, sp, s, p, u in plan.assignments()],
    )


def _write_locked(run_dir, data, model, labels, fold, metric_name, values, seed, external_labels=None, selection=None):
    locked = os.path.join(run_dir, "locked")
    os.makedirs(locked, exist_ok=True)
    checksum = persist_artifact(model, os.path.join(locked, "cluster_model.prlm"))
    _write_tile_labels(os.path.join(locked, "tile_clusters.tsv"), data, labels, external_labels)
    persist_artifact(
        {
            "fold": fold,
            "seed": seed,
            "selection": selection or f"fold with the median {metric_name} across folds",
            "metric": metric_name,
            "fold_values": [float(v) for v in values],
            "model_sha256": checksum,
            "n_clusters": model.n_clusters,
        },
        os.path.join(locked, "locked.json"),
    )
    return locked


def run_classification(data, cfg, out_dir, jobs=1):
    """Institution-disjoint CV of slide-level subtype classification."""
    from .reports import emit_reports

    validate_labels(data)
    plan = make_folds(data.manifest, cfg.cv.folds, "institution", cfg.cv.seed, with_validation=True)
    audit_fold_plan(plan)
    run_dir = os.path.join(out_dir, CLASSIFY_DIR)
    _write_run_json(run_dir, "classification", cfg, plan)
    tasks = [("classification", data, plan, f, cfg, os.path.join(run_dir, f"fold_{f}")) for f in range(plan.k)]
    metrics = _run_folds(_fold_task, tasks, jobs)

    values = [m["auc_val"] for m in metrics]
    lf = _locked_choice(values)
    model = load_artifact(os.path.join(run_dir, f"fold_{lf}", "cluster_model.prlm"))
    labels, ext_labels = _read_tile_labels(os.path.join(run_dir, f"fold_{lf}", "tile_clusters.tsv"), data)
    locked = _write_locked(run_dir, data, model, labels, lf, "validation AUC", values, fold_seed(cfg.cv.seed, lf), ext_labels)
    positive = _positive_label(data.manifest)

    def target(owners, train):
        return np.array([data.manifest.slide(o).label == positive for o, t in zip(owners, train) if t])

    def fit_fn(X, y, names):
        return fit_logistic(X, y, names, ridge=cfg.model.ridge, max_iter=cfg.model.max_iter)

    _locked_fits(data, plan, labels, model.n_clusters, cfg, target, fit_fn, "slide", locked)
    return emit_reports(run_dir)


# -- survival -----------------------------------------------------------------


def _patient_table(data, labels, n_clusters):
    return compose_table(labels, data.tile_patient, n_clusters, owners=data.manifest.patients)


def _survival_eval(data, table, fit, delta, threshold, endpoint):
    X = clr_features(table.W, delta)
    score = fit.linear_predictor(X)
    time, event = data.survival[endpoint].lookup(table.owner_ids)
    return score, time, event


def _safe_logrank(time, event, high):
    try:
        return logrank_test((time[high], event[high]), (time[~high], event[~high]))[1]
    except PreconditionError:
        return float("nan")


def _survival_fold(data, plan, fold, cfg, out, endpoint, locked=None):
    """One survival fold.

    ``locked = (model, labels, ext_labels)`` reuses an existing cluster model
    and its tile labels instead of clustering the fold's training tiles.
    """
    seed = fold_seed(cfg.cv.seed, fold)
    sampled = None
    if locked is None:
        model, _, sampled = fit_cluster_model(data, plan.slides(fold, "train"), cfg, seed)
        labels = tile_clusters(model, data, sampled)
        ext_labels = tile_clusters(model, data.external) if data.external is not None else None
    else:
        model, labels, ext_labels = locked
    C = model.n_clusters
    table = _patient_table(data, labels, C)
    train_p = set(plan.patients(fold, "train"))
    train = np.array([p in train_p for p in table.owner_ids])
    if endpoint not in data.survival:
        raise PreconditionError(f"no {endpoint} survival table")
    time, event = data.survival[endpoint].lookup(table.owner_ids)
    X, delta = _features(table.W, np.flatnonzero(train), cfg)
    fit = fit_cox(X[train], time[train], event[train], feature_names(C), ridge=cfg.model.ridge, max_iter=cfg.model.max_iter)
    score = fit.linear_predictor(X)
    groups = split_risk_groups(score[train], score)
    test = ~train
    metrics = {
        "fold": fold,
        "seed": seed,
        "n_clusters": C,
        "delta": delta,
        "threshold": groups.threshold,
        "cindex_test": concordance_index(score[test], time[test], event[test]),
        "logrank_p_test": _safe_logrank(time[test], event[test], groups.high[test]),
        "n_sampled": int(sampled.size) if sampled is not None else 0,
    }
    splits = np.where(train, "train", "test")
    rows = [
        [p, sp, repr(float(t)), str(int(e)), repr(float(s)), "high" if h else "low"]
        for p, sp, t, e, s, h in zip(table.owner_ids, splits, time, event, score, groups.high)
    ]
    if data.external is not None and endpoint in data.external.survival:
        ext = data.external
        ext_table = _patient_table(ext, ext_labels, C)
        se, te, ee = _survival_eval(ext, ext_table, fit, delta, groups.threshold, endpoint)
        he = split_risk_groups(None, se, threshold=groups.threshold).high
        metrics["cindex_external"] = concordance_index(se, te, ee)
        metrics["logrank_p_external"] = _safe_logrank(te, ee, he)
        rows += [
            [p, "external", repr(float(t)), str(int(e)), repr(float(s)), "high" if h else "low"]
            for p, t, e, s, h in zip(ext_table.owner_ids, te, ee, se, he)
        ]
    os.makedirs(out, exist_ok=True)
    if sampled is not None:
        persist_artifact(model, os.path.join(out, "cluster_model.prlm"))
        _write_tile_labels(os.path.join(out, "tile_clusters.tsv"), data, labels, ext_labels)
    persist_artifact(table, os.path.join(out, "composition.tsv"))
    persist_artifact(fit, os.path.join(out, "fit.tsv"))
    write_tsv(os.path.join(out, "predictions.tsv"), ["patient_id", "split", "time", "event", "score", "group"], rows)
    _json(os.path.join(out, "metrics.json"), metrics)
    return metrics


def run_survival(data, cfg, out_dir, endpoint="os", jobs=1):
    """Patient-level CV of a Cox model over CLR patient compositions.

    Overall survival clusters every fold and locks the median-c-index fold's
    model.  Recurrence-free survival reuses that locked model unchanged, so
    the overall-survival run must exist in ``out_dir``.
    """
    from .reports import emit_reports

    endpoint = normalize_endpoint(endpoint)
    tag = ENDPOINT_TAGS[endpoint]
    plan = make_folds(data.manifest, cfg.cv.folds, "patient", cfg.cv.seed, with_validation=False)
    audit_fold_plan(plan)
    run_dir = os.path.join(out_dir, SURVIVAL_DIR.format(endpoint=tag))
    _write_run_json(run_dir, "survival", cfg, plan, endpoint)

    if endpoint == "overall_survival":
        tasks = [("survival", data, plan, f, cfg, os.path.join(run_dir, f"fold_{f}"), endpoint) for f in range(plan.k)]
        metrics = _run_folds(_fold_task, tasks, jobs)
        values = [m["cindex_test"] for m in metrics]
        lf = _locked_choice(values)
        model = load_artifact(os.path.join(run_dir, f"fold_{lf}", "cluster_model.prlm"))
        labels, ext_labels = _read_tile_labels(os.path.join(run_dir, f"fold_{lf}", "tile_clusters.tsv"), data)
        seed = fold_seed(cfg.cv.seed, lf)
        metric_name = "test c-index"
        selection = None
    else:
        os_locked = os.path.join(out_dir, SURVIVAL_DIR.format(endpoint="os"), "locked")
        model_path = os.path.join(os_locked, "cluster_model.prlm")
        if not os.path.exists(model_path):
            raise ArtifactError(f"{model_path}: recurrence-free runs reuse the overall-survival locked model; run the os endpoint first")
        model = load_artifact(model_path)
        prov = load_artifact(os.path.join(os_locked, "locked.json"))
        labels, ext_labels = _read_tile_labels(os.path.join(os_locked, "tile_clusters.tsv"), data)
        for f in range(plan.k):
            try:
                _survival_fold(
                    data, plan, f, cfg, os.path.join(run_dir, f"fold_{f}"), endpoint, locked=(model, labels, ext_labels)
                )
            except PRLError as exc:
                raise _with_fold(exc, f)
        lf, seed, metric_name, values = prov["fold"], prov["seed"], prov["metric"], prov["fold_values"]
        selection = f"reused from the overall-survival run ({prov['selection']})"

    locked = _write_locked(run_dir, data, model, labels, lf, metric_name, values, seed, ext_labels, selection)
    tab = data.survival[endpoint]

    def target(owners, train):
        t, e = tab.lookup([o for o, k in zip(owners, train) if k])
        return t, e

    def fit_fn(X, te, names):
        return fit_cox(X, te[0], te[1], names, ridge=cfg.model.ridge, max_iter=cfg.model.max_iter)

    _locked_fits(data, plan, labels, model.n_clusters, cfg, target, fit_fn, "patient", locked)
    return emit_reports(run_dir)


def check_run_dir(run_dir):
    if not os.path.exists(os.path.join(run_dir, "run.json")):
        raise ArtifactError(f"{run_dir}: not a run directory (run.json missing)")
    return _read_json(os.path.join(run_dir, "run.json"))


def validate_labels(data):
    missing = [s.slide_id for s in data.manifest.slides if s.label is None]
    if missing:
        raise ValidationError(f"{len(missing)} slide(s) lack a label, e.g. {missing[0]!r}")
