"""Fisher's combined probability, cross-fold coefficient averaging, ROC/AUC."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..errors import PreconditionError, ValidationError

log = logging.getLogger(__name__)

P_FLOOR = 1e-300


def fisher_combine(p_values, floor=P_FLOOR):
    """Fisher's method: ``chi2 = -2 sum ln p`` on ``2k`` degrees of freedom."""
    p = np.asarray(p_values, dtype=float).ravel()
    if p.size == 0:
        raise PreconditionError("no p-values to combine")
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise ValidationError("p-values must lie in [0, 1]")
    if np.any(p < floor):
        log.warning("clamping %d p-value(s) below %g", int((p < floor).sum()), floor)
        p = np.maximum(p, floor)
    chi2 = float(-2.0 * np.sum(np.log(p)))
    return chi2, float(stats.chi2.sf(chi2, 2 * p.size))


@dataclass
class CombinedFit:
    feature_names: list
    coefficients: np.ndarray
    p_values: np.ndarray
    significant: np.ndarray
    n_folds: int
    alpha: float = 0.05
    std_errors: np.ndarray = None


def average_coefficients(fits, alpha=0.05):
    """Mean coefficient and Fisher-combined p per feature across folds."""
    fits = list(fits)
    if not fits:
        raise PreconditionError("no fits to combine")
    names = list(fits[0].feature_names)
    for f in fits[1:]:
        if list(f.feature_names) != names:
            raise ValidationError("fits were made on different feature sets")
    coefs = np.array([f.coefficients for f in fits])
    ses = np.array([f.std_errors for f in fits])
    pv = np.array([f.p_values for f in fits])
    combined = np.array([fisher_combine(pv[:, j])[1] for j in range(len(names))])
    return CombinedFit(
        names, coefs.mean(axis=0), combined, combined < alpha, len(fits), alpha, ses.mean(axis=0)
    )


def roc_auc(scores, labels):
    """AUC from the rank-sum statistic (ties averaged) plus ROC points.

    Returns ``(auc, fpr, tpr)``; the trapezoid area under ``(fpr, tpr)``
    equals ``auc``.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.size != y.size:
        raise ValidationError("scores and labels differ in length")
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise PreconditionError("both classes must be present")
    ranks = stats.rankdata(s)
    auc = (ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0)
    thresholds = np.unique(s)[::-1]
    tpr = np.r_[0.0, [(s[y] >= th).sum() / n1 for th in thresholds]]
    fpr = np.r_[0.0, [(s[~y] >= th).sum() / n0 for th in thresholds]]
    return float(auc), fpr, tpr
