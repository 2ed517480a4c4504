"""Kaplan-Meier, logrank test, Harrell's concordance and risk-group splits."""

from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..errors import PreconditionError, ValidationError


@dataclass
class KaplanMeierCurve:
    times: np.ndarray  # distinct observed times
    survival: np.ndarray  # S(t) just after each time
    at_risk: np.ndarray
    events: np.ndarray
    censored_times: np.ndarray
    censored_survival: np.ndarray

    def at(self, t):
        """Survival probability at time ``t`` (right-continuous step)."""
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)


def kaplan_meier(times, events):
    """Product-limit estimate; censored observations are kept for plotting."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    if times.size == 0:
        raise PreconditionError("Kaplan-Meier needs at least one observation")
    if np.any(times <= 0):
        raise PreconditionError("survival times must be positive")
    uniq = np.unique(times)
    at_risk = np.array([(times >= t).sum() for t in uniq])
    d = np.array([(events & (times == t)).sum() for t in uniq])
    surv = np.cumprod(1.0 - d / at_risk)
    cens = np.sort(times[~events])
    curve = KaplanMeierCurve(uniq, surv, at_risk, d, cens, np.empty(0))
    curve.censored_survival = curve.at(cens)
    return curve


def logrank_test(group_a, group_b):
    """One degree-of-freedom logrank test between two ``(times, events)`` groups.

    Returns ``(chi2, p)``.
    """
    ta, ea = (np.asarray(group_a[0], dtype=float), np.asarray(group_a[1], dtype=bool))
    tb, eb = (np.asarray(group_b[0], dtype=float), np.asarray(group_b[1], dtype=bool))
    if ta.size == 0 or tb.size == 0:
        raise PreconditionError("both groups must be non-empty")
    t = np.r_[ta, tb]
    e = np.r_[ea, eb]
    in_a = np.r_[np.ones(ta.size, bool), np.zeros(tb.size, bool)]
    if not e.any():
        raise PreconditionError("logrank test needs at least one event")
    obs = exp = var = 0.0
    for s in np.unique(t[e]):
        risk = t >= s
        n = risk.sum()
        na = (risk & in_a).sum()
        dead = e & (t == s)
        d = dead.sum()
        obs += (dead & in_a).sum()
        exp += d * na / n
        if n > 1:
            var += d * (na / n) * (1 - na / n) * (n - d) / (n - 1)
    if var <= 0:
        return 0.0, 1.0
    chi2 = (obs - exp) ** 2 / var
    return float(chi2), float(stats.chi2.sf(chi2, 1))


def concordance_index(scores, times, events, chunk=2048):
    """Harrell's c: share of comparable pairs ordered correctly by risk score.

    A pair is comparable when the shorter time is an observed event; the
    higher score should belong to the shorter time.  Score ties count 1/2.
    """
    s = np.asarray(scores, dtype=float)
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=bool)
    if not (s.size == t.size == e.size):
        raise ValidationError("scores, times and events differ in length")
    num = 0.0
    den = 0
    idx = np.flatnonzero(e)
    for start in range(0, idx.size, chunk):
        i = idx[start:start + chunk]
        comparable = t[i][:, None] < t[None, :]
        den += int(comparable.sum())
        si = s[i][:, None]
        num += float((comparable & (si > s[None, :])).sum()) + 0.5 * float((comparable & (si == s[None, :])).sum())
    if den == 0:
        raise PreconditionError("no comparable pairs")
    return num / den


@dataclass
class RiskGroups:
    threshold: float
    high: np.ndarray  # bool per evaluated owner

    def labels(self):
        return np.where(self.high, "high", "low")


def risk_threshold(train_scores):
    train_scores = np.asarray(train_scores, dtype=float)
    if train_scores.size == 0:
        raise PreconditionError("training scores are empty")
    return float(np.median(train_scores))


def split_risk_groups(train_scores, eval_scores, threshold=None):
    """High risk iff score > median of the training scores.

    Pass ``threshold`` to reuse a previously computed training median on
    another cohort.
    """
    thr = risk_threshold(train_scores) if threshold is None else float(threshold)
    return RiskGroups(thr, np.asarray(eval_scores, dtype=float) > thr)
