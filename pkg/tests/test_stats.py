import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps
from scipy.integrate import trapezoid

from oracles import pair_auc, pair_cindex, planted_cox, planted_logistic
from prl.errors import PreconditionError, SeparationError, SingularMatrixError, ValidationError
from prl.stats import (
    ModelFit,
    average_coefficients,
    concordance_index,
    fisher_combine,
    fit_cox,
    fit_logistic,
    kaplan_meier,
    logrank_test,
    predict_proba,
    roc_auc,
    split_risk_groups,
)
from prl.stats.fit import GRAD_TOL


# -- logistic -----------------------------------------------------------------


def test_logistic_symmetric_intercept_zero():
    x = np.r_[-2, -1, -0.5, 0.5, 1, 2, -2, -1, -0.5, 0.5, 1, 2][:, None]
    y = np.r_[0, 0, 1, 0, 1, 1, 0, 1, 0, 1, 0, 1].astype(bool)
    fit = fit_logistic(x, y)
    assert abs(fit.intercept) < 1e-6


def test_logistic_planted_recovery(rng):
    X, y = planted_logistic(rng)
    fit = fit_logistic(X, y)
    assert fit.converged and fit.grad_norm < GRAD_TOL
    assert np.all(np.abs(fit.coefficients - [1.5, -2.0]) < 3 * fit.std_errors)
    assert abs(fit.intercept - 0.3) < 3 * fit.intercept_se
    assert np.all(np.diff(fit.loglik_trace) >= -1e-9)
    assert np.all((fit.p_values >= 0) & (fit.p_values <= 1))
    p = predict_proba(fit, X)
    assert np.all((p > 0) & (p < 1))


def test_logistic_matches_scipy_optimum(rng):
    X, y = planted_logistic(rng, n=300)
    fit = fit_logistic(X, y)
    from scipy.optimize import minimize

    Xi = np.c_[np.ones(len(X)), X]

    def nll(b):
        eta = Xi @ b
        return float(np.sum(np.logaddexp(0, eta) - y * eta))

    ref = minimize(nll, np.zeros(3), method="BFGS", options={"gtol": 1e-10}).x
    np.testing.assert_allclose(np.r_[fit.intercept, fit.coefficients], ref, atol=1e-5)


def test_logistic_singular_and_separation():
    x = np.ones((10, 1))
    y = np.r_[np.zeros(5), np.ones(5)].astype(bool)
    with pytest.raises(SingularMatrixError):
        fit_logistic(x, y)
    sep = np.arange(10.0)[:, None]
    with pytest.raises(SeparationError) as info:
        fit_logistic(sep, y)
    assert "x0" in info.value.features
    fit = fit_logistic(sep, y, ridge=1.0)
    assert fit.penalized and fit.coefficients[0] > 0


def test_logistic_one_class():
    with pytest.raises((PreconditionError, ValidationError)):
        fit_logistic(np.zeros((4, 1)), np.zeros(4, bool))


# -- Cox ----------------------------------------------------------------------


def test_cox_ordering_forces_sign():
    x = np.r_[np.ones(5), np.zeros(5)][:, None]
    t = np.arange(1.0, 11.0)
    e = np.ones(10, bool)
    with pytest.raises(SeparationError):
        fit_cox(x, t, e)
    assert fit_cox(x, t, e, ridge=0.1).coefficients[0] > 0
    # one inversion keeps the likelihood bounded; the sign is unchanged
    t2 = t.copy()
    t2[[4, 5]] = t2[[5, 4]]
    assert fit_cox(x, t2, e).coefficients[0] > 0


def test_cox_planted_recovery(rng):
    X, t, e = planted_cox(rng)
    fit = fit_cox(X, t, e)
    assert fit.converged
    assert abs(fit.coefficients[0] - 1.0) < 3 * fit.std_errors[0]
    assert abs((1 - e.mean()) - 0.3) < 0.05


def _efron_loglik(beta, x, t, e):
    ll = 0.0
    eta = x * beta
    for s in np.unique(t[e]):
        dead = (t == s) & e
        risk = t >= s
        d = dead.sum()
        r = np.exp(eta[risk]).sum()
        dd = np.exp(eta[dead]).sum()
        ll += eta[dead].sum()
        for l in range(d):
            ll -= np.log(r - l / d * dd)
    return ll


def test_cox_efron_ties_oracle(rng):
    x = rng.normal(size=40)
    t = rng.integers(1, 8, size=40).astype(float)
    e = rng.random(40) < 0.8
    fit = fit_cox(x[:, None], t, e)
    assert fit.log_likelihood == pytest.approx(_efron_loglik(fit.coefficients[0], x, t, e), abs=1e-9)
    h = 1e-5
    grad = (_efron_loglik(fit.coefficients[0] + h, x, t, e) - _efron_loglik(fit.coefficients[0] - h, x, t, e)) / (2 * h)
    assert abs(grad) < 1e-5


def test_cox_shift_invariance(rng):
    X, t, e = planted_cox(rng, n=300)
    X2 = np.c_[X, rng.normal(size=len(X))]
    a = fit_cox(X2, t, e)
    b = fit_cox(X2 + np.array([5.0, -3.0]), t, e)
    np.testing.assert_allclose(a.coefficients, b.coefficients, atol=1e-8)


def test_cox_errors():
    with pytest.raises((PreconditionError, ValidationError)):
        fit_cox(np.ones((3, 1)), [1.0, 2.0, 3.0], [False, False, False])


# -- survival curves, logrank, concordance -----------------------------------


def test_kaplan_meier_examples():
    km = kaplan_meier([1, 2, 3], [True, True, True])
    np.testing.assert_allclose(km.survival, [2 / 3, 1 / 3, 0.0])
    km = kaplan_meier([1, 2, 3], [False, False, False])
    np.testing.assert_array_equal(km.survival, [1, 1, 1])
    km = kaplan_meier([1, 2, 2, 4], [True, True, True, False])
    np.testing.assert_allclose(km.survival, [3 / 4, 3 / 4 * 1 / 3, 3 / 4 * 1 / 3])
    assert km.at(0.5) == 1.0
    with pytest.raises(PreconditionError):
        kaplan_meier([], [])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 20), st.booleans()), min_size=1, max_size=40))
def test_kaplan_meier_monotone(obs):
    t, e = zip(*obs)
    km = kaplan_meier(t, e)
    assert km.survival[0] <= 1.0
    assert np.all(np.diff(km.survival) <= 0)
    assert np.all(km.survival >= 0)


def test_logrank_examples(rng):
    t = rng.exponential(1.0, 50)
    e = rng.random(50) < 0.7
    chi2, p = logrank_test((t, e), (t, e))
    assert chi2 == pytest.approx(0.0, abs=1e-12) and p == pytest.approx(1.0)
    a = rng.exponential(1 / 3.0, 200)
    b = rng.exponential(1.0, 200)
    assert logrank_test((a, np.ones(200, bool)), (b, np.ones(200, bool)))[1] < 1e-4
    chi2, p = logrank_test(([1.0, 2.0], [True, False]), ([3.0], [False]))
    assert 0 < p <= 1
    with pytest.raises(PreconditionError):
        logrank_test(([1.0], [False]), ([2.0], [False]))


def test_logrank_matches_reference_formula(rng):
    # independent evaluation through the hypergeometric variance at each event time
    ta, tb = rng.integers(1, 10, 30).astype(float), rng.integers(1, 10, 25).astype(float)
    ea, eb = rng.random(30) < 0.7, rng.random(25) < 0.7
    O = E = V = 0.0
    t = np.r_[ta, tb]
    e = np.r_[ea, eb]
    g = np.r_[np.ones(30), np.zeros(25)].astype(bool)
    for s in sorted(set(t[e])):
        n = (t >= s).sum()
        n1 = ((t >= s) & g).sum()
        d = ((t == s) & e).sum()
        O += ((t == s) & e & g).sum()
        E += d * n1 / n
        if n > 1:
            k = np.arange(d + 1)
            pmf = sps.hypergeom(n, n1, d).pmf(k)
            V += np.sum(pmf * k**2) - np.sum(pmf * k) ** 2
    chi2, p = logrank_test((ta, ea), (tb, eb))
    assert chi2 == pytest.approx((O - E) ** 2 / V, rel=1e-12)


def test_concordance_examples(rng):
    t = rng.exponential(1.0, 100)
    e = np.ones(100, bool)
    assert concordance_index(-t, t, e) == 1.0
    assert concordance_index(np.zeros(100), t, e) == 0.5
    with pytest.raises(PreconditionError):
        concordance_index([1, 2], [1.0, 2.0], [False, False])


def test_concordance_random_scores():
    rng = np.random.default_rng(3)
    t = rng.exponential(1.0, 3000)
    e = rng.random(3000) < 0.7
    assert abs(concordance_index(rng.normal(size=3000), t, e) - 0.5) < 0.03


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60), st.integers(0, 10**6))
def test_concordance_and_auc_pair_oracles(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 6, n).astype(float)
    t = rng.integers(1, 8, n).astype(float)
    e = rng.random(n) < 0.6
    if e.any() and any(e[i] and t[i] < t[j] for i in range(n) for j in range(n)):
        assert concordance_index(s, t, e) == pair_cindex(s, t, e)
        assert concordance_index(np.exp(s), t, e) == concordance_index(s, t, e)
    y = rng.random(n) < 0.5
    if 0 < y.sum() < n:
        auc, fpr, tpr = roc_auc(s, y)
        assert auc == pair_auc(s, y)
        assert auc == pytest.approx(trapezoid(tpr, fpr), abs=1e-12)
        assert auc + roc_auc(-s, y)[0] == pytest.approx(1.0, abs=1e-12)
        assert roc_auc(3 * s + 1, y)[0] == auc


def test_concordance_negation_without_ties(rng):
    s = rng.normal(size=80)
    t = rng.exponential(1.0, 80)
    e = rng.random(80) < 0.7
    assert concordance_index(s, t, e) == pytest.approx(1 - concordance_index(-s, t, e), abs=1e-12)


def test_auc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])[0] == 1.0
    rng = np.random.default_rng(0)
    assert abs(roc_auc(rng.normal(size=10000), rng.random(10000) < 0.5)[0] - 0.5) < 0.02
    with pytest.raises(PreconditionError):
        roc_auc([1, 2], [1, 1])


def test_risk_groups():
    g = split_risk_groups([1, 2, 3], [2.0, 2.5, 1.0])
    assert g.threshold == 2.0
    assert g.high.tolist() == [False, True, False]
    ext = split_risk_groups([], [1.5, 3.0], threshold=g.threshold)
    assert ext.threshold == 2.0 and ext.high.tolist() == [False, True]


# -- Fisher combining ---------------------------------------------------------


def test_fisher_examples(caplog):
    assert fisher_combine([1.0, 1.0, 1.0]) == (0.0, 1.0)
    chi2, p = fisher_combine([0.05, 0.05])
    assert chi2 == pytest.approx(-4 * np.log(0.05), abs=1e-12)
    assert chi2 == pytest.approx(11.98293, abs=1e-5)
    assert p == pytest.approx(0.05**2 * (1 - 2 * np.log(0.05)), abs=1e-12)
    assert p == pytest.approx(0.0175, abs=5e-5)
    assert fisher_combine([0.3])[1] == pytest.approx(0.3, abs=1e-12)
    with caplog.at_level("WARNING"):
        chi2, p = fisher_combine([0.0, 0.5])
    assert np.isfinite(chi2) and "clamping" in caplog.text
    with pytest.raises(ValidationError):
        fisher_combine([1.5])


def _fit(coefs, ps, names=("a", "b")):
    c = np.asarray(coefs, float)
    return ModelFit(list(names), c, np.ones_like(c), np.asarray(ps, float), True, 3, -1.0)


def test_average_coefficients():
    f1 = _fit([1.0, 0.0], [0.04, 0.5])
    f2 = _fit([3.0, 0.0], [0.9, 0.5])
    comb = average_coefficients([f1, f2])
    np.testing.assert_allclose(comb.coefficients, [2.0, 0.0])
    chi2 = -2 * (np.log(0.04) + np.log(0.9))
    assert comb.p_values[0] == pytest.approx(sps.chi2.sf(chi2, 4), abs=1e-12)
    assert comb.significant.tolist() == [comb.p_values[0] < 0.05, False]
    same = average_coefficients([f1, f1])
    np.testing.assert_array_equal(same.coefficients, f1.coefficients)
    with pytest.raises(ValidationError):
        average_coefficients([f1, _fit([1, 2], [0.1, 0.1], names=("a", "c"))])
