"""Shared fit container, Wald inference and Newton-Raphson driver."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from ..errors import SeparationError, SingularMatrixError

log = logging.getLogger(__name__)

GRAD_TOL = 1e-8
REL_LOGLIK_TOL = 1e-10
MAX_ITER = 100
# a Newton step this large at a stationary point means the optimum is at infinity
DIVERGENCE_STEP = 0.5


@dataclass
class ModelFit:
    feature_names: list
    coefficients: np.ndarray
    std_errors: np.ndarray
    p_values: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    model: str = "logistic"
    intercept: float = None
    intercept_se: float = None
    ridge: float = 0.0
    grad_norm: float = float("nan")
    loglik_trace: list = field(default_factory=list)

    @property
    def penalized(self):
        return self.ridge > 0

    def linear_predictor(self, X):
        eta = np.asarray(X, dtype=float) @ self.coefficients
        if self.intercept is not None:
            eta = eta + self.intercept
        return eta

    def __eq__(self, other):
        if not isinstance(other, ModelFit):
            return NotImplemented
        return (
            list(self.feature_names) == list(other.feature_names)
            and np.array_equal(self.coefficients, other.coefficients)
            and np.array_equal(self.std_errors, other.std_errors)
            and np.array_equal(self.p_values, other.p_values)
            and self.converged == other.converged
            and self.iterations == other.iterations
            and self.log_likelihood == other.log_likelihood
            and self.model == other.model
            and self.intercept == other.intercept
            and self.intercept_se == other.intercept_se
            and self.ridge == other.ridge
        )


def wald_p(coef, se):
    """Two-sided normal tail probability of ``coef / se``."""
    z = np.abs(np.asarray(coef, dtype=float) / np.asarray(se, dtype=float))
    return np.clip(special.erfc(z / np.sqrt(2.0)), 0.0, 1.0)


def check_rank(X, names, what):
    if X.shape[1] == 0:
        return
    s = np.linalg.svd(X, compute_uv=False)
    tol = s.max() * max(X.shape) * np.finfo(float).eps * 16
    if s.min() <= tol:
        # name the columns spanning the null space
        _, _, vt = np.linalg.svd(X)
        null = np.abs(vt[-1])
        bad = [names[j] for j in np.flatnonzero(null > 1e-6)]
        raise SingularMatrixError(f"{what} information matrix is singular (collinear or constant: {bad})")


def newton_maximize(objective, beta0, names, max_iter=MAX_ITER, what="model"):
    """Maximise a concave objective with step-halving Newton iterations.

    ``objective(beta)`` returns ``(value, gradient, neg_hessian)``.  Stops when
    the gradient norm drops below ``GRAD_TOL`` or the relative change of the
    objective below ``REL_LOGLIK_TOL``.  A stationary point whose Newton step
    is still O(1) signals separation / monotone likelihood.
    """
    beta = np.array(beta0, dtype=float)
    value, grad, info = objective(beta)
    trace = [value]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        step = _solve(info, grad, names, what)
        t = 1.0
        while True:
            cand = beta + t * step
            v, g, h = objective(cand)
            if np.isfinite(v) and v >= value - 1e-12 * abs(value):
                break
            t *= 0.5
            if t < 1e-10:
                v, g, h, cand = value, grad, info, beta
                break
        rel = abs(v - value) / max(abs(value), 1e-300)
        beta, value, grad, info = cand, v, g, h
        trace.append(value)
        if np.linalg.norm(grad) < GRAD_TOL or rel < REL_LOGLIK_TOL:
            converged = True
            break
    try:
        final_step = np.linalg.solve(info, grad)
    except np.linalg.LinAlgError:
        final_step = np.full_like(beta, np.inf)
    diverging = np.flatnonzero(~(np.abs(final_step) < DIVERGENCE_STEP))
    if diverging.size:
        raise SeparationError(
            f"{what}: likelihood keeps increasing along {[names[j] for j in diverging]} "
            "(separation / monotone likelihood); consider a ridge penalty",
            features=[names[j] for j in diverging],
        )
    # polish: converged must mean a small gradient
    for _ in range(5):
        if np.linalg.norm(grad) < GRAD_TOL:
            break
        beta = beta + _solve(info, grad, names, what)
        value, grad, info = objective(beta)
        trace.append(value)
    converged = converged and np.linalg.norm(grad) < GRAD_TOL
    if not converged:
        log.warning("%s: Newton iterations did not converge (|grad|=%.3g)", what, np.linalg.norm(grad))
    return beta, value, grad, info, converged, it, trace


def _solve(info, grad, names, what):
    try:
        c = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise SingularMatrixError(f"{what}: information matrix is not positive definite")
    y = np.linalg.solve(c, grad)
    return np.linalg.solve(c.T, y)


def covariance(info, what="model"):
    try:
        return np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise SingularMatrixError(f"{what}: information matrix is singular")
