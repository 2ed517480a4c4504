"""Cluster characterization: Spearman, signed two-sample K-S, hypergeometric fold."""

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import special, stats

from .errors import PreconditionError, ValidationError
from .ingest import CELL_TYPES, GROWTH_PATTERNS, write_tsv


@dataclass
class SpearmanResult:
    rho: float
    p_value: float
    significant: bool
    n: int


def spearman(x, y, alpha=0.01):
    """Rank correlation (average ranks for ties) with a t-approximation p-value."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size:
        raise ValidationError("x and y differ in length")
    if x.size < 3:
        raise PreconditionError("Spearman correlation needs at least 3 pairs")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValidationError("rho is undefined for a constant variable")
    rx = stats.rankdata(x)
    ry = stats.rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    rho = float(np.dot(rx, ry) / np.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    rho = min(1.0, max(-1.0, rho))
    n = x.size
    if abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p = float(2.0 * special.stdtr(n - 2, -abs(t)))
    return SpearmanResult(rho, p, p < alpha, n)


def ks_critical(alpha):
    """``c(alpha) = sqrt(-0.5 * ln(alpha / 2))``."""
    if not 0 < alpha < 1:
        raise PreconditionError("alpha must lie in (0, 1)")
    return math.sqrt(-0.5 * math.log(alpha / 2.0))


@dataclass
class SignedKsResult:
    statistic: float
    sign: int
    significant: bool
    alpha: float
    n: int
    m: int
    threshold: float
    p_value: float

    @property
    def signed(self):
        return self.sign * self.statistic


def ecdf_difference(sample, reference):
    """Pooled support points and ``F_sample - F_reference`` evaluated there."""
    a = np.sort(np.asarray(sample, dtype=float))
    b = np.sort(np.asarray(reference, dtype=float))
    support = np.unique(np.concatenate([a, b]))
    fa = np.searchsorted(a, support, side="right") / a.size
    fb = np.searchsorted(b, support, side="right") / b.size
    return support, fa - fb


def ks_two_sample_signed(cluster_sample, population_sample, alpha=0.01):
    """Two-sample K-S statistic with an over/under-representation sign.

    ``sign=+1`` when, at the first point achieving the supremum, the cluster
    ECDF lies below the population ECDF (cluster values are larger).
    Significant iff ``D > c(alpha) * sqrt((n + m) / (n m))``.
    """
    a = np.asarray(cluster_sample, dtype=float).ravel()
    b = np.asarray(population_sample, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise PreconditionError("K-S test needs two non-empty samples")
    _, diff = ecdf_difference(a, b)
    j = int(np.argmax(np.abs(diff)))
    D = float(abs(diff[j]))
    sign = 1 if diff[j] <= 0 else -1
    n, m = a.size, b.size
    thr = ks_critical(alpha) * math.sqrt((n + m) / (n * m))
    p = float(stats.kstwobign.sf(D * math.sqrt(n * m / (n + m))))
    return SignedKsResult(D, sign, D > thr, alpha, n, m, thr, p)


@dataclass
class FoldResult:
    k: int
    n: int
    K: int
    N: int
    fold: float
    expected: float
    p_value: float
    significant: bool
    sided: str = "two-sided"

    @property
    def enriched(self):
        return self.fold > 1

    @property
    def depleted(self):
        return self.fold < 1


def _check_counts(k, n, K, N):
    for name, v in (("k", k), ("n", n), ("K", K), ("N", N)):
        if int(v) != v or v < 0:
            raise ValidationError(f"{name}={v} must be a non-negative integer")
    if not (k <= n <= N and k <= K <= N):
        raise ValidationError(f"impossible counts k={k}, n={n}, K={K}, N={N}")
    if k < max(0, n + K - N):
        raise ValidationError(f"k={k} below the support minimum {n + K - N}")


def hypergeom_logpmf(x, n, K, N):
    """``log P[X = x]`` for draws ``n`` from ``N`` items with ``K`` successes.

    Terms come from the ratio ``p(x+1)/p(x)`` summed outward from the mode
    and normalized over the support, which avoids the cancellation of
    log-factorial differences at large ``N``.  Outside the support the
    result is ``-inf``.
    """
    n, K, N = int(n), int(K), int(N)
    lo, hi = max(0, n + K - N), min(n, K)
    mode = min(max((n + 1) * (K + 1) // (N + 2), lo), hi)
    up = np.arange(mode, hi, dtype=float)
    down = np.arange(lo, mode, dtype=float)

    def step(v):
        return np.log(K - v) + np.log(n - v) - np.log(v + 1) - np.log(N - K - n + v + 1)

    log_t = np.concatenate([-np.cumsum(step(down)[::-1])[::-1], [0.0], np.cumsum(step(up))])
    log_t -= special.logsumexp(log_t)
    x = np.asarray(x)
    xi = np.asarray(x, dtype=np.int64)
    inside = (x == xi) & (xi >= lo) & (xi <= hi)
    out = np.full(x.shape, -np.inf)
    out[inside] = log_t[xi[inside] - lo]
    return out if out.ndim else float(out)


# exact rational tails up to this population size
_EXACT_LIMIT = 5000


def hypergeom_tails(k, n, K, N):
    """``(P[X <= k], P[X >= k])``; exact rational arithmetic for small N."""
    lo, hi = max(0, n + K - N), min(n, K)
    if N <= _EXACT_LIMIT:
        total = math.comb(N, n)
        le = sum(math.comb(K, x) * math.comb(N - K, n - x) for x in range(lo, k + 1))
        ge = sum(math.comb(K, x) * math.comb(N - K, n - x) for x in range(k, hi + 1))
        return float(Fraction(le, total)), float(Fraction(ge, total))
    xs = np.arange(lo, hi + 1)
    lp = hypergeom_logpmf(xs, n, K, N)
    le = float(np.exp(special.logsumexp(lp[xs <= k])))
    ge = float(np.exp(special.logsumexp(lp[xs >= k])))
    return min(le, 1.0), min(ge, 1.0)


def hypergeom_fold(k, n, K, N, alpha=0.01, sided="two-sided"):
    """Fold enrichment ``k / E[X]`` with ``E[X] = n K / N`` and its p-value.

    ``sided`` is ``"two-sided"`` (twice the smaller tail, capped at 1),
    ``"greater"`` or ``"less"``.
    """
    _check_counts(k, n, K, N)
    k, n, K, N = int(k), int(n), int(K), int(N)
    expected = n * K / N if N else 0.0
    fold = k / expected if expected > 0 else float("nan")
    le, ge = hypergeom_tails(k, n, K, N)
    if sided == "two-sided":
        p = min(1.0, 2.0 * min(le, ge))
    elif sided == "greater":
        p = ge
    elif sided == "less":
        p = le
    else:
        raise ValidationError(f"unknown sidedness {sided!r}")
    return FoldResult(k, n, K, N, fold, expected, p, p < alpha, sided)


# -- per-cluster characterization -------------------------------------------


@dataclass
class Characterization:
    cluster_ids: list
    columns: list
    values: np.ndarray  # clusters x columns
    # p-value column -> significance flags, where the rule is not p < alpha
    flags: dict = None

    def column(self, name):
        return self.values[:, self.columns.index(name)]


def _coverage(found, total, what, min_coverage):
    frac = found / total if total else 0.0
    if frac < min_coverage:
        raise ValidationError(f"{what} annotations cover {frac:.1%} of the cohort, below {min_coverage:.0%}")


def cluster_characterize(
    tile_ids,
    tile_clusters,
    n_clusters,
    compositions=None,
    signatures=None,
    cell_counts=None,
    growth_patterns=None,
    alpha=0.01,
    exclude_cluster_from_population=False,
    min_coverage=0.5,
):
    """Matrix of per-cluster statistics against the external annotations.

    compositions : CompositionTable of patient-level proportions (rows are
        patients); correlated against ``signatures`` (SignatureTable).
    cell_counts : CellCounts; per-tile counts compared cluster vs population.
    growth_patterns : GrowthPatterns; per-tile labels, hypergeometric fold.
    """
    tile_ids = list(tile_ids)
    labels = np.asarray(tile_clusters, dtype=np.int64)
    clusters = list(range(n_clusters))
    columns, blocks = [], []
    flags = {}

    if signatures is not None and compositions is not None:
        pos = {p: i for i, p in enumerate(signatures.patient_ids)}
        shared = [p for p in compositions.owner_ids if p in pos]
        _coverage(len(shared), len(compositions.owner_ids), "signature", min_coverage)
        W = compositions.rows(shared)
        S = signatures.values[[pos[p] for p in shared]]
        for j, name in enumerate(signatures.names):
            rho = np.full(n_clusters, np.nan)
            pv = np.full(n_clusters, np.nan)
            ok = np.isfinite(S[:, j])
            for c in clusters:
                try:
                    r = spearman(W[ok, c], S[ok, j], alpha)
                except (ValidationError, PreconditionError):
                    continue
                rho[c], pv[c] = r.rho, r.p_value
            columns += [f"rho_{name}", f"p_rho_{name}"]
            blocks += [rho, pv]

    if cell_counts is not None:
        pos = {t: i for i, t in enumerate(cell_counts.tile_ids)}
        have = np.array([t in pos for t in tile_ids])
        _coverage(int(have.sum()), len(tile_ids), "cell count", min_coverage)
        valid = have & (labels >= 0)
        counts = np.zeros((len(tile_ids), len(CELL_TYPES)))
        idx = np.flatnonzero(valid)
        counts[idx] = cell_counts.counts[[pos[tile_ids[i]] for i in idx]]
        for j, ct in enumerate(CELL_TYPES):
            d = np.full(n_clusters, np.nan)
            pv = np.full(n_clusters, np.nan)
            sig = np.zeros(n_clusters, dtype=bool)
            for c in clusters:
                inside = valid & (labels == c)
                pop = valid & ~inside if exclude_cluster_from_population else valid
                if not inside.any() or not pop.any():
                    continue
                r = ks_two_sample_signed(counts[inside, j], counts[pop, j], alpha)
                d[c], pv[c], sig[c] = r.signed, r.p_value, r.significant
            flags[f"p_ks_{ct}"] = sig
            columns += [f"ks_{ct}", f"p_ks_{ct}"]
            blocks += [d, pv]

    if growth_patterns is not None:
        pat = dict(zip(growth_patterns.tile_ids, growth_patterns.patterns))
        annotated = np.array([pat.get(t) is not None for t in tile_ids]) & (labels >= 0)
        if not annotated.any():
            raise ValidationError("no annotated growth-pattern tiles among the clustered tiles")
        tile_pat = np.array([pat.get(t) or "" for t in tile_ids])
        N = int(annotated.sum())
        for name in GROWTH_PATTERNS:
            is_p = annotated & (tile_pat == name)
            K = int(is_p.sum())
            fold = np.full(n_clusters, np.nan)
            pv = np.full(n_clusters, np.nan)
            for c in clusters:
                in_c = annotated & (labels == c)
                n = int(in_c.sum())
                if n == 0 or K == 0:
                    continue
                r = hypergeom_fold(int((in_c & is_p).sum()), n, K, N, alpha)
                fold[c], pv[c] = r.fold, r.p_value
            columns += [f"fold_{name}", f"p_fold_{name}"]
            blocks += [fold, pv]

    values = np.column_stack(blocks) if blocks else np.zeros((n_clusters, 0))
    return Characterization(clusters, columns, values, flags)


def write_characterization(ch, path, alpha=0.01):
    """Matrix TSV; each p-value column is followed by a 0/1 significance flag.

    K-S flags follow the critical-value rule of :func:`ks_two_sample_signed`,
    the others ``p < alpha``.
    """
    flags = ch.flags or {}
    header = ["cluster"]
    for col in ch.columns:
        header.append(col)
        if col.startswith("p_"):
            header.append(f"sig_{col[2:]}")
    rows = []
    for i, c in enumerate(ch.cluster_ids):
        row = [str(c)]
        for j, col in enumerate(ch.columns):
            v = ch.values[i, j]
            row.append("NA" if not np.isfinite(v) else repr(float(v)))
            if col.startswith("p_"):
                sig = flags[col][i] if col in flags else np.isfinite(v) and v < alpha
                row.append("1" if sig else "0")
        rows.append(row)
    write_tsv(path, header, rows)
