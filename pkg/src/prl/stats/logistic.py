"""Logistic regression by iteratively reweighted least squares (Newton)."""

import warnings

import numpy as np
from scipy.special import expit, log_expit

from ..errors import PreconditionError, ValidationError
from .fit import ModelFit, check_rank, covariance, newton_maximize, wald_p


def _loglik(X, y, beta, ridge, penalized):
    eta = X @ beta
    ll = float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))
    mu = expit(eta)
    grad = X.T @ (y - mu)
    w = mu * (1 - mu)
    info = (X * w[:, None]).T @ X
    if ridge > 0:
        ll -= 0.5 * ridge * float(np.sum(beta[penalized] ** 2))
        grad = grad - ridge * np.where(penalized, beta, 0.0)
        info = info + ridge * np.diag(penalized.astype(float))
    return ll, grad, info


def fit_logistic(X, y, feature_names=None, ridge=0.0, max_iter=100):
    """Maximum-likelihood logistic regression with an intercept.

    Parameters
    ----------
    X : (n, p) array
        Feature matrix (CLR composition features in the pipeline).
    y : (n,) array of {0, 1}
    ridge : float
        Optional L2 penalty on the non-intercept coefficients.  Zero gives
        the plain MLE, which raises on separation or a singular design.

    Returns
    -------
    ModelFit
        Wald standard errors from the inverse (penalized) information.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValidationError("design rows must align with responses")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValidationError("design contains non-finite entries")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("responses must be 0/1")
    if y.min() == y.max():
        raise PreconditionError("both classes must be present")
    n, p = X.shape
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(p)]
    if n <= p + 1:
        warnings.warn(f"logistic fit with n={n} rows and {p + 1} parameters", stacklevel=2)
    Xi = np.column_stack([np.ones(n), X])
    all_names = ["intercept"] + names
    if ridge == 0:
        check_rank(Xi, all_names, "logistic")
    penalized = np.r_[False, np.ones(p, dtype=bool)]
    beta0 = np.zeros(p + 1)
    ybar = y.mean()
    beta0[0] = np.log(ybar / (1 - ybar))
    beta, ll, grad, info, converged, it, trace = newton_maximize(
        lambda b: _loglik(Xi, y, b, ridge, penalized), beta0, all_names, max_iter, "logistic"
    )
    se = np.sqrt(np.diag(covariance(info, "logistic")))
    pv = wald_p(beta, se)
    return ModelFit(
        feature_names=names,
        coefficients=beta[1:],
        std_errors=se[1:],
        p_values=pv[1:],
        converged=bool(converged),
        iterations=it,
        log_likelihood=ll,
        model="logistic",
        intercept=float(beta[0]),
        intercept_se=float(se[0]),
        ridge=float(ridge),
        grad_norm=float(np.linalg.norm(grad)),
        loglik_trace=trace,
    )


def predict_proba(fit, X):
    return expit(fit.linear_predictor(X))
