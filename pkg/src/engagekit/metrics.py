"""Classification metrics and per-feature correlation with the engagement label."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .dataset import LABEL
from .preprocess import WindowTable

UNDEFINED = float("nan")


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (e.g. AUROC with one class)."""


def _check(y_true, scores) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y_true)
    s = np.asarray(scores, dtype=np.float64)
    if y.ndim != 1 or y.shape != s.shape:
        raise ValueError("labels and scores must be 1-D and of equal length")
    if len(y) == 0:
        raise ValueError("need at least one instance")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int64), s


def auroc(y_true, scores) -> float:
    """Probability that a random engaged instance outscores a random disengaged one, ties counting half.

    Computed from the Mann-Whitney rank sum with midranks for ties.
    """
    y, s = _check(y_true, scores)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUROC is undefined when only one class is present")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass(frozen=True)
class ClassificationReport:
    accuracy: float
    engaged_precision: float
    engaged_recall: float
    disengaged_precision: float
    disengaged_recall: float
    n: int
    threshold: float

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "engaged_precision": self.engaged_precision,
            "engaged_recall": self.engaged_recall,
            "disengaged_precision": self.disengaged_precision,
            "disengaged_recall": self.disengaged_recall,
        }


def _ratio(num: int, den: int) -> float:
    return num / den if den else UNDEFINED


def classification_report(y_true, scores, threshold: float = 0.5) -> ClassificationReport:
    """Accuracy and per-class precision/recall with ``score >= threshold`` predicting engaged.

    Precision of a class that is never predicted, or recall of a class that
    never occurs, is NaN rather than 0.
    """
    y, s = _check(y_true, scores)
    pred = (s >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    return ClassificationReport(
        accuracy=(tp + tn) / len(y),
        engaged_precision=_ratio(tp, tp + fp),
        engaged_recall=_ratio(tp, tp + fn),
        disengaged_precision=_ratio(tn, tn + fn),
        disengaged_recall=_ratio(tn, tn + fp),
        n=len(y),
        threshold=threshold,
    )


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    den = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if den == 0.0:
        return UNDEFINED
    return float(np.clip((xc @ yc) / den, -1.0, 1.0))


def feature_correlations(windows: WindowTable) -> dict[str, float]:
    """Pearson r of every feature column against the label, pooled over all rows.

    Rows with a missing value in a column are dropped for that column only.
    Constant columns get NaN.
    """
    if len(windows) < 2:
        raise ValueError("need at least two windows")
    y = windows.data[LABEL].to_numpy(dtype=np.float64)
    if y.min() == y.max():
        raise ValueError("label is constant; correlations are undefined")
    X = windows.X()
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for j, name in enumerate(windows.feature_names):
            ok = ~np.isnan(X[:, j])
            out[name] = pearson(X[ok, j], y[ok]) if ok.sum() >= 2 else UNDEFINED
    return out


def base_name(column: str) -> str:
    for suffix in ("_var", "_chg"):
        if column.endswith(suffix):
            return column[: -len(suffix)]
    return column


def key_features(corrs: dict[str, float], threshold: float = 0.20) -> list[str]:
    """Base feature names with any column (median, variance or change flag) at ``|r| > threshold``."""
    out: list[str] = []
    for name, r in corrs.items():
        if not math.isnan(r) and abs(r) > threshold:
            b = base_name(name)
            if b not in out:
                out.append(b)
    return out
