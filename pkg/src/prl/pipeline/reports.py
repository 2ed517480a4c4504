"""Report emission: aggregate tables, SVG figures and the run summary.

Everything here reads only the run directory, so reports can be rebuilt
with ``prl report``.  Outputs carry no timestamps or absolute paths and are
byte-identical for identical runs.
"""

import hashlib
import json
import os

import numpy as np

from ..errors import ArtifactError
from ..ingest import read_tsv, write_tsv
from ..stats import average_coefficients, kaplan_meier, logrank_test, roc_auc
from ..store import canonical_json, load_artifact

_FOLD_FILES = ("metrics.json", "predictions.tsv", "fit.tsv")


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "prl"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    import matplotlib.pyplot as plt

    plt.close(fig)


def _fmt(v):
    return "NA" if v is None or not np.isfinite(v) else repr(float(v))


def _check_folds(run_dir, k):
    for f in range(k):
        for name in _FOLD_FILES:
            if not os.path.exists(os.path.join(run_dir, f"fold_{f}", name)):
                raise ArtifactError(f"fold {f}: missing {name} in {os.path.join(run_dir, f'fold_{f}')}")
        if not os.path.exists(os.path.join(run_dir, "locked", f"fit_fold{f}.tsv")):
            raise ArtifactError(f"fold {f}: missing locked refit fit_fold{f}.tsv")
    if not os.path.exists(os.path.join(run_dir, "locked", "locked.json")):
        raise ArtifactError(f"{run_dir}: missing locked/locked.json")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_forest(combined, path_tsv, path_svg=None, title="Averaged coefficients"):
    rows = []
    for name, b, se, p, sig in zip(
        combined.feature_names, combined.coefficients, combined.std_errors, combined.p_values, combined.significant
    ):
        rows.append([name, _fmt(b), _fmt(se), _fmt(p), "1" if sig else "0"])
    write_tsv(path_tsv, ["feature", "coefficient", "std_error", "p_value", "significant"], rows)
    if path_svg:
        plt = _plt()
        n = len(combined.feature_names)
        fig, ax = plt.subplots(figsize=(5, 0.25 * n + 1.2))
        y = np.arange(n)[::-1]
        colors = ["#b2182b" if s else "#4d4d4d" for s in combined.significant]
        ax.errorbar(combined.coefficients, y, xerr=1.96 * combined.std_errors, fmt="none", ecolor=colors, lw=1)
        ax.scatter(combined.coefficients, y, c=colors, s=12, zorder=3)
        ax.axvline(0.0, color="#999999", lw=0.8, ls="--")
        ax.set_yticks(y)
        ax.set_yticklabels(combined.feature_names, fontsize=7)
        ax.set_xlabel(f"coefficient (95% CI); red: Fisher p < {combined.alpha:g}")
        ax.set_title(title, fontsize=9)
        fig.tight_layout()
        _save(fig, path_svg)


def _locked_combined(run_dir, k, alpha):
    fits = [load_artifact(os.path.join(run_dir, "locked", f"fit_fold{f}.tsv")) for f in range(k)]
    return average_coefficients(fits, alpha)


def _summary(run_dir, run, per_fold, extra):
    cfg = run["config"]
    summary = {
        "kind": run["kind"],
        "endpoint": run["endpoint"],
        "config": cfg,
        "config_hash": run["config_hash"],
        "seeds": {"cv": cfg["cv"]["seed"], "folds": [m["seed"] for m in per_fold]},
        "gamma": cfg["cluster"]["gamma"],
        "K": cfg["cluster"]["k"],
        "k_assign": cfg["cluster"]["k_assign"],
        "delta": [m["delta"] for m in per_fold],
        "n_clusters": [m["n_clusters"] for m in per_fold],
        "locked": load_artifact(os.path.join(run_dir, "locked", "locked.json")),
    }
    summary.update(extra)
    body = canonical_json(summary)
    summary["summary_hash"] = hashlib.sha256(body).hexdigest()
    with open(os.path.join(run_dir, "summary.json"), "wb") as fh:
        fh.write(canonical_json(summary))
    return summary


def _mean(values):
    v = [x for x in values if x is not None and np.isfinite(x)]
    return float(np.mean(v)) if v else float("nan")


def _classification_reports(run_dir, run, metrics):
    k = run["folds"]
    alpha = run["config"]["model"]["alpha"]
    auc_rows, roc_rows = [], []
    curves = {}
    for f in range(k):
        _, preds = read_tsv(os.path.join(run_dir, f"fold_{f}", "predictions.tsv"), ("split", "label", "score"))
        for split in ("val", "test", "external"):
            sel = [r for r in preds if r["split"] == split]
            if not sel:
                continue
            y = np.array([r["label"] == "1" for r in sel])
            s = np.array([float(r["score"]) for r in sel])
            auc, fpr, tpr = roc_auc(s, y)
            auc_rows.append([str(f), split, _fmt(auc), str(int(y.sum())), str(int((~y).sum()))])
            roc_rows += [[str(f), split, _fmt(a), _fmt(b)] for a, b in zip(fpr, tpr)]
            curves[(f, split)] = (fpr, tpr, auc)
    means = {}
    for split in ("val", "test", "external"):
        vals = [m.get(f"auc_{split}") for m in metrics if f"auc_{split}" in m]
        if vals:
            means[split] = _mean(vals)
            auc_rows.append(["mean", split, _fmt(means[split]), "", ""])
    write_tsv(os.path.join(run_dir, "auc.tsv"), ["fold", "split", "auc", "n_positive", "n_negative"], auc_rows)
    write_tsv(os.path.join(run_dir, "roc.tsv"), ["fold", "split", "fpr", "tpr"], roc_rows)

    plt = _plt()
    fig, axes = plt.subplots(1, 2 if any(s == "external" for _, s in curves) else 1, figsize=(8, 4), squeeze=False)
    for ax, split in zip(axes[0], ("test", "external")):
        for (f, sp), (fpr, tpr, auc) in sorted(curves.items()):
            if sp == split:
                ax.plot(fpr, tpr, lw=1, label=f"fold {f} (AUC {auc:.3f})")
        ax.plot([0, 1], [0, 1], color="#999999", lw=0.8, ls="--")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title(f"{split}: mean AUC {means.get(split, float('nan')):.3f}", fontsize=9)
        ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    _save(fig, os.path.join(run_dir, "roc.svg"))

    combined = _locked_combined(run_dir, k, alpha)
    write_forest(combined, os.path.join(run_dir, "forest.tsv"), os.path.join(run_dir, "forest.svg"), "Logistic coefficients")
    return {
        "mean_auc": means,
        "fold_auc": {s: [m.get(f"auc_{s}") for m in metrics] for s in means},
        "significant_features": [n for n, s in zip(combined.feature_names, combined.significant) if s],
    }


def _survival_reports(run_dir, run, metrics):
    k = run["folds"]
    alpha = run["config"]["model"]["alpha"]
    c_rows, lr_rows = [], []
    pooled_t, pooled_e, pooled_h = [], [], []
    for f, m in enumerate(metrics):
        c_rows.append([str(f), "test", _fmt(m["cindex_test"])])
        lr_rows.append([str(f), "test", _fmt(m["logrank_p_test"])])
        if "cindex_external" in m:
            c_rows.append([str(f), "external", _fmt(m["cindex_external"])])
            lr_rows.append([str(f), "external", _fmt(m["logrank_p_external"])])
        _, preds = read_tsv(os.path.join(run_dir, f"fold_{f}", "predictions.tsv"), ("split", "time", "event", "group"))
        for r in preds:
            if r["split"] == "test":
                pooled_t.append(float(r["time"]))
                pooled_e.append(r["event"] == "1")
                pooled_h.append(r["group"] == "high")
    mean_c = {"test": _mean([m["cindex_test"] for m in metrics])}
    c_rows.append(["mean", "test", _fmt(mean_c["test"])])
    if any("cindex_external" in m for m in metrics):
        mean_c["external"] = _mean([m.get("cindex_external") for m in metrics])
        c_rows.append(["mean", "external", _fmt(mean_c["external"])])
    t, e, h = np.array(pooled_t), np.array(pooled_e), np.array(pooled_h)
    chi2, p_pooled = logrank_test((t[h], e[h]), (t[~h], e[~h]))
    lr_rows.append(["pooled", "test", _fmt(p_pooled)])
    write_tsv(os.path.join(run_dir, "cindex.tsv"), ["fold", "cohort", "cindex"], c_rows)
    write_tsv(os.path.join(run_dir, "logrank.tsv"), ["fold", "cohort", "p_value"], lr_rows)

    km_rows = []
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, mask, color in (("high", h, "#b2182b"), ("low", ~h, "#2166ac")):
        curve = kaplan_meier(t[mask], e[mask])
        km_rows += [
            [name, _fmt(tt), _fmt(s), str(int(n)), str(int(d))]
            for tt, s, n, d in zip(curve.times, curve.survival, curve.at_risk, curve.events)
        ]
        ax.step(np.r_[0.0, curve.times], np.r_[1.0, curve.survival], where="post", color=color, label=f"{name} risk (n={mask.sum()})")
        ax.plot(curve.censored_times, curve.censored_survival, "|", color=color, ms=6)
    ax.set_xlabel("time (months)")
    ax.set_ylabel("survival probability")
    ax.set_title(f"pooled test folds, logrank p = {p_pooled:.3g}", fontsize=9)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, os.path.join(run_dir, "km.svg"))
    write_tsv(os.path.join(run_dir, "km.tsv"), ["group", "time", "survival", "at_risk", "events"], km_rows)

    combined = _locked_combined(run_dir, k, alpha)
    write_forest(combined, os.path.join(run_dir, "forest.tsv"), os.path.join(run_dir, "forest.svg"), "Cox coefficients")
    return {
        "mean_cindex": mean_c,
        "fold_cindex": [m["cindex_test"] for m in metrics],
        "logrank_p_pooled_test": p_pooled,
        "logrank_chi2_pooled_test": chi2,
        "significant_features": [n for n, s in zip(combined.feature_names, combined.significant) if s],
    }


def emit_reports(run_dir):
    """Rebuild every report of a completed run directory; returns the summary."""
    path = os.path.join(run_dir, "run.json")
    if not os.path.exists(path):
        raise ArtifactError(f"{run_dir}: not a run directory (run.json missing)")
    run = _read_json(path)
    _check_folds(run_dir, run["folds"])
    metrics = [_read_json(os.path.join(run_dir, f"fold_{f}", "metrics.json")) for f in range(run["folds"])]
    if run["kind"] == "classification":
        extra = _classification_reports(run_dir, run, metrics)
    else:
        extra = _survival_reports(run_dir, run, metrics)
    return _summary(run_dir, run, metrics, extra)
