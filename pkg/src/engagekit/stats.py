"""PCA, one-way ANOVA, variance F-test, Fleiss' kappa, Spearman correlation and OLS trend test."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

UNDEFINED = float("nan")


def f_sf(F: float, dfn: float, dfd: float) -> float:
    """Upper tail of the F distribution via the regularized incomplete beta function."""
    if F <= 0:
        return 1.0
    if math.isinf(F):
        return 0.0
    if F == 1.0 and dfn == dfd:
        return 0.5  # symmetric beta at its midpoint; betainc is off by a few ulps here
    return float(special.betainc(dfd / 2.0, dfn / 2.0, dfd / (dfd + dfn * F)))


def t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t."""
    if math.isinf(t):
        return 0.0
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


# --------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaResult:
    axes: np.ndarray  # (k, d), orthonormal rows
    coords: np.ndarray  # (n, k)
    explained: np.ndarray  # fraction of total variance per axis
    eigenvalues: np.ndarray  # all covariance eigenvalues, descending
    mean: np.ndarray


def pca_project(X: np.ndarray, k: int = 2) -> PcaResult:
    """Project rows of *X* onto the top-*k* eigenvectors of its covariance matrix.

    Each axis is signed so that its largest-magnitude component is positive.
    Fewer than *k* axes are returned (with a warning) when the covariance
    rank is below *k*.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("need a 2-D matrix with at least two rows")
    if not np.isfinite(X).all():
        raise ValueError("PCA input must be finite")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (len(X) - 1)
    evals, evecs = np.linalg.eigh(cov)
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    total = float(np.trace(cov))
    tol = max(total, 1.0) * 1e-12
    rank = int(np.sum(evals > tol))
    if rank < k:
        warnings.warn(f"covariance rank {rank} < requested {k} components", RuntimeWarning, stacklevel=2)
        k = rank
    axes = evecs[:, :k].T.copy()
    for i in range(k):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    explained = evals[:k] / total if total > 0 else np.zeros(k)
    return PcaResult(axes, Xc @ axes.T, explained, evals, mean)


# --------------------------------------------------------------------------
# tests


@dataclass(frozen=True)
class StatResult:
    statistic: float
    p: float
    df: tuple[float, ...]


def anova_oneway(groups) -> StatResult:
    """One-way ANOVA F statistic from between/within sums of squares."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2 or any(len(g) < 2 for g in groups):
        raise ValueError("need at least two groups of at least two values")
    k = len(groups)
    n = sum(len(g) for g in groups)
    grand = np.concatenate(groups).mean()
    ss_between = sum(len(g) * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(float(((g - g.mean()) ** 2).sum()) for g in groups)
    dfb, dfw = k - 1, n - k
    if ss_within == 0.0:
        F = 0.0 if ss_between == 0.0 else math.inf
    else:
        F = (ss_between / dfb) / (ss_within / dfw)
    return StatResult(float(F), f_sf(F, dfb, dfw), (dfb, dfw))


def var_ftest(a, b) -> StatResult:
    """Two-sided F-test for equal variances; statistic is larger over smaller sample variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va < vb:
        va, vb = vb, va
        dfn, dfd = len(b) - 1, len(a) - 1
    else:
        dfn, dfd = len(a) - 1, len(b) - 1
    if vb == 0.0:
        raise ValueError("zero variance in the denominator sample")
    F = va / vb
    return StatResult(float(F), min(1.0, 2.0 * f_sf(F, dfn, dfd)), (dfn, dfd))


def fleiss_kappa(counts) -> float:
    """Fleiss' kappa for an items x categories matrix of rater counts.

    Returns NaN when expected agreement is 1 (every rating in one category).
    """
    m = np.asarray(counts)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 2:
        raise ValueError("need an items x categories matrix with at least two categories")
    if (m < 0).any() or not np.all(m == np.round(m)):
        raise ValueError("counts must be non-negative integers")
    raters = m.sum(axis=1)
    if (raters != raters[0]).any() or raters[0] < 2:
        raise ValueError("every item needs the same number (>= 2) of raters")
    r = float(raters[0])
    N = m.shape[0]
    p_j = m.sum(axis=0) / (N * r)
    P_i = ((m * m).sum(axis=1) - r) / (r * (r - 1))
    P_bar = P_i.mean()
    P_e = float((p_j**2).sum())
    if P_e >= 1.0:
        return UNDEFINED
    return float((P_bar - P_e) / (1.0 - P_e))


def midranks(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of midranks; NaN when either input is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need two equal-length samples of at least two values")
    rx = midranks(x) - (len(x) + 1) / 2.0
    ry = midranks(y) - (len(y) + 1) / 2.0
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0.0:
        return UNDEFINED
    return float(np.clip((rx @ ry) / den, -1.0, 1.0))


@dataclass(frozen=True)
class LinearTrend:
    slope: float
    intercept: float
    t: float
    p: float
    df: int


def ols_trend(x, y) -> LinearTrend:
    """Least-squares line through (x, y) with a two-sided t-test of zero slope."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n < 3 or len(y) != n:
        raise ValueError("need at least three points")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise ValueError("x is constant")
    slope = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    df = n - 2
    s2 = float(resid @ resid) / df
    se = math.sqrt(s2 / sxx)
    scale = max(1.0, float(np.abs(y).max()))
    if se <= 1e-12 * scale:
        if abs(slope) <= 1e-12 * scale:
            return LinearTrend(0.0, intercept, 0.0, 1.0, df)
        return LinearTrend(slope, intercept, math.copysign(math.inf, slope), 0.0, df)
    t = slope / se
    return LinearTrend(slope, intercept, t, t_sf2(t, df), df)
