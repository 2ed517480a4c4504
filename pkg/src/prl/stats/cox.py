"""Cox proportional hazards with Efron tie handling, fitted by Newton-Raphson."""

import numpy as np

from ..errors import PreconditionError, ValidationError
from .fit import ModelFit, check_rank, covariance, newton_maximize, wald_p


class _EfronTerms:
    """Precomputed risk-set bookkeeping for a fixed (time, event) sample."""

    def __init__(self, time, event):
        order = np.argsort(-time, kind="stable")  # descending time
        self.order = order
        t = time[order]
        e = event[order]
        self.t_sorted = t
        self.e_sorted = e
        ev_times = np.unique(t[e])[::-1]  # descending
        # risk set of time s = all rows with t >= s = prefix [0, last index with t >= s]
        self.risk_end = np.searchsorted(-t, -ev_times, side="right") - 1
        group = np.searchsorted(-ev_times, -t[e])  # event row -> its time group
        self.event_rows = np.flatnonzero(e)
        self.event_group = group
        d = np.bincount(group, minlength=ev_times.size)
        # one Efron term per event: fraction l/d for l = 0..d-1
        self.term_group = np.repeat(np.arange(ev_times.size), d)
        starts = np.r_[0, np.cumsum(d)[:-1]]
        self.term_frac = (np.arange(d.sum()) - np.repeat(starts, d)) / np.repeat(d, d)
        self.n_groups = ev_times.size


def _partial_loglik(X, terms, beta, ridge):
    Xs = X[terms.order]
    eta = Xs @ beta
    shift = eta.max()
    r = np.exp(eta - shift)
    xr = Xs * r[:, None]
    xxr = Xs[:, :, None] * xr[:, None, :]
    S0 = np.cumsum(r)[terms.risk_end]
    S1 = np.cumsum(xr, axis=0)[terms.risk_end]
    S2 = np.cumsum(xxr, axis=0)[terms.risk_end]
    g, rows = terms.event_group, terms.event_rows
    p = X.shape[1]
    D0 = np.bincount(g, weights=r[rows], minlength=terms.n_groups)
    D1 = np.zeros((terms.n_groups, p))
    np.add.at(D1, g, xr[rows])
    D2 = np.zeros((terms.n_groups, p, p))
    np.add.at(D2, g, xxr[rows])
    tg, f = terms.term_group, terms.term_frac
    a0 = S0[tg] - f * D0[tg]
    a1 = S1[tg] - f[:, None] * D1[tg]
    a2 = S2[tg] - f[:, None, None] * D2[tg]
    ll = float(eta[rows].sum() - np.sum(np.log(a0) + shift))
    m1 = a1 / a0[:, None]
    grad = Xs[rows].sum(axis=0) - m1.sum(axis=0)
    info = (a2 / a0[:, None, None]).sum(axis=0) - m1.T @ m1
    if ridge > 0:
        ll -= 0.5 * ridge * float(beta @ beta)
        grad = grad - ridge * beta
        info = info + ridge * np.eye(p)
    return ll, grad, info


def fit_cox(X, time, event, feature_names=None, ridge=0.0, max_iter=100):
    """Maximise the Efron partial likelihood.

    No intercept (it cancels from the partial likelihood).  Positive
    coefficients raise the hazard; negative ones associate with longer
    survival.  ``ridge`` adds an L2 penalty, flagged on the returned fit.
    """
    X = np.asarray(X, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    if X.ndim != 2 or X.shape[0] != time.size or time.size != event.size:
        raise ValidationError("design rows must align with (time, event)")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(time))):
        raise ValidationError("design contains non-finite entries")
    if np.any(time <= 0):
        raise PreconditionError("survival times must be positive")
    if not event.any():
        raise PreconditionError("Cox model needs at least one observed event")
    n, p = X.shape
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(p)]
    if ridge == 0:
        check_rank(X - X.mean(axis=0), names, "Cox")
    # centring leaves the partial likelihood unchanged and keeps exp() tame
    Xc = X - X.mean(axis=0)
    terms = _EfronTerms(time, event)
    beta, ll, grad, info, converged, it, trace = newton_maximize(
        lambda b: _partial_loglik(Xc, terms, b, ridge), np.zeros(p), names, max_iter, "Cox"
    )
    se = np.sqrt(np.diag(covariance(info, "Cox")))
    return ModelFit(
        feature_names=names,
        coefficients=beta,
        std_errors=se,
        p_values=wald_p(beta, se),
        converged=bool(converged),
        iterations=it,
        log_likelihood=ll,
        model="cox",
        ridge=float(ridge),
        grad_norm=float(np.linalg.norm(grad)),
        loglik_trace=trace,
    )
