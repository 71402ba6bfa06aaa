"""Generalized, individualized and random-sampling train/test protocols and the experiment runner."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Union

import numpy as np
import pandas as pd

from .dataset import LABEL
from .metrics import UndefinedMetricError, auroc, classification_report
from .models import GbdtConfig, GbdtModel, LinearModel, fit_logistic, train_gbdt
from .preprocess import WindowTable, apply_scaler, fit_scaler, select_features

UNDEFINED = float("nan")


@dataclass(frozen=True)
class Generalized:
    train_users: int


@dataclass(frozen=True)
class Individualized:
    train_fraction: float


@dataclass(frozen=True)
class RandomSample:
    train_fraction: float
    seeds: tuple[int, ...] = tuple(range(10))


SplitSpec = Union[Generalized, Individualized, RandomSample]


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    test: np.ndarray
    provenance: dict = field(default_factory=dict)


def _check_fraction(fraction: float) -> None:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")


def n_train_rows(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` robust to binary rounding (0.3 * 10 is 3, not 4)."""
    return math.ceil(round(fraction * n, 9))


def generalized_splits(windows: WindowTable, train_users: int) -> list[Split]:
    """One split per combination of *train_users* participants; everyone else is tested."""
    users = windows.participants
    P = len(users)
    if not 1 <= train_users <= P - 1:
        raise ValueError(f"train_users must lie in [1, {P - 1}] for {P} participants")
    pid = windows.data["participant_id"].to_numpy()
    out = []
    for combo in itertools.combinations(users, train_users):
        mask = np.isin(pid, combo)
        out.append(
            Split(
                np.flatnonzero(mask),
                np.flatnonzero(~mask),
                {"family": "generalized", "train_users": list(combo),
                 "test_users": [u for u in users if u not in combo]},
            )
        )
    return out


def individualized_split(user_windows: WindowTable, fraction: float) -> Split:
    """Chronologically first ``ceil(fraction * N)`` windows train; the rest test.

    Indices refer to rows of *user_windows*; chronology is (session index,
    window start).
    """
    _check_fraction(fraction)
    users = user_windows.participants
    if len(users) != 1:
        raise ValueError(f"individualized split needs a single participant, got {len(users)}")
    d = user_windows.data
    order = np.lexsort((d["t_start_s"].to_numpy(), d["session_index"].to_numpy()))
    n = len(order)
    k = n_train_rows(fraction, n)
    if k <= 0 or k >= n:
        raise ValueError(f"fraction {fraction} of {n} windows leaves an empty side")
    return Split(np.sort(order[:k]), np.sort(order[k:]),
                 {"family": "individualized", "user": users[0], "train_fraction": fraction})


def random_split(windows: WindowTable, fraction: float, seed: int) -> Split:
    """Uniform sample of ``ceil(fraction * N)`` rows without replacement as train."""
    _check_fraction(fraction)
    n = len(windows)
    k = n_train_rows(fraction, n)
    if k <= 0 or k >= n:
        raise ValueError(f"fraction {fraction} of {n} windows leaves an empty side")
    rng = np.random.default_rng(seed)
    train = np.sort(rng.choice(n, size=k, replace=False))
    test = np.setdiff1d(np.arange(n), train, assume_unique=True)
    return Split(train, test, {"family": "random", "train_fraction": fraction, "seed": seed})


# --------------------------------------------------------------------------
# running


@dataclass
class EvalReport:
    family: str
    key: float
    split_id: str
    auroc: float
    accuracy: float
    engaged_precision: float
    engaged_recall: float
    disengaged_precision: float
    disengaged_recall: float
    n_train: int
    n_test: int
    auroc_defined: bool
    model_fingerprint: str
    provenance: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SplitResult:
    report: EvalReport
    predictions: pd.DataFrame
    model: GbdtModel | LinearModel | None = None


def config_fingerprint(cfg, feature_group, model_kind: str) -> str:
    payload = {"config": asdict(cfg) if cfg is not None else None,
               "features": feature_group if isinstance(feature_group, str) else list(feature_group),
               "model": model_kind}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def expand_spec(windows: WindowTable, spec: SplitSpec) -> list[tuple[WindowTable, Split]]:
    """(table, split) jobs for a spec; individualized jobs index per-user sub-tables."""
    if isinstance(spec, Generalized):
        return [(windows, s) for s in generalized_splits(windows, spec.train_users)]
    if isinstance(spec, Individualized):
        pid = windows.data["participant_id"].to_numpy()
        jobs = []
        for u in windows.participants:
            sub = windows.where(pid == u)
            jobs.append((sub, individualized_split(sub, spec.train_fraction)))
        return jobs
    if isinstance(spec, RandomSample):
        return [(windows, random_split(windows, spec.train_fraction, s)) for s in spec.seeds]
    raise TypeError(f"unknown split spec {spec!r}")


def _spec_key(spec: SplitSpec) -> tuple[str, float]:
    if isinstance(spec, Generalized):
        return "generalized", float(spec.train_users)
    if isinstance(spec, Individualized):
        return "individualized", float(spec.train_fraction)
    return "random", float(spec.train_fraction)


def _split_id(prov: dict) -> str:
    if prov["family"] == "generalized":
        return "train=" + "+".join(prov["train_users"])
    if prov["family"] == "individualized":
        return f"user={prov['user']}"
    return f"seed={prov['seed']}"


def run_split(
    table: WindowTable,
    split: Split,
    model_cfg: GbdtConfig | None = GbdtConfig(),
    feature_group: str | Iterable[str] = "all",
    threshold: float = 0.5,
    model_kind: str = "gbdt",
    keep_model: bool = False,
    family_key: tuple[str, float] = ("", UNDEFINED),
) -> SplitResult:
    """Select features, standardize with train statistics, fit, and score the test rows."""
    table = select_features(table, feature_group)
    train = table.take(split.train)
    test = table.take(split.test)
    scaler = fit_scaler(train)
    train = apply_scaler(scaler, train)
    test = apply_scaler(scaler, test)
    if model_kind == "gbdt":
        model = train_gbdt(train, model_cfg or GbdtConfig())
    elif model_kind == "logistic":
        # standardized missing values are imputed with the train mean (0)
        model = fit_logistic(np.nan_to_num(train.X(), nan=0.0), train.y(), features=train.feature_names)
        test = type(test)(test.features, test.data.fillna({c: 0.0 for c in test.feature_names}))
    else:
        raise ValueError(f"unknown model kind {model_kind!r}")
    prob = model.predict_proba(test)
    y = test.y()
    try:
        auc, defined = auroc(y, prob), True
    except UndefinedMetricError:
        auc, defined = UNDEFINED, False
    rep = classification_report(y, prob, threshold)
    report = EvalReport(
        family=family_key[0],
        key=family_key[1],
        split_id=_split_id(split.provenance),
        auroc=auc,
        accuracy=rep.accuracy,
        engaged_precision=rep.engaged_precision,
        engaged_recall=rep.engaged_recall,
        disengaged_precision=rep.disengaged_precision,
        disengaged_recall=rep.disengaged_recall,
        n_train=len(split.train),
        n_test=len(split.test),
        auroc_defined=defined,
        model_fingerprint=config_fingerprint(model_cfg, feature_group, model_kind),
        provenance=split.provenance,
    )
    pred = test.data[["participant_id", "session_id", "session_index", "t_start_s", LABEL]].copy()
    pred["prob"] = prob
    return SplitResult(report, pred, model if keep_model else None)


def run_experiment(
    windows: WindowTable,
    spec: SplitSpec,
    model_cfg: GbdtConfig | None = GbdtConfig(),
    feature_group: str | Iterable[str] = "all",
    threshold: float = 0.5,
    model_kind: str = "gbdt",
    keep_models: bool = False,
) -> list[SplitResult]:
    """Run every split of *spec* in provenance order."""
    key = _spec_key(spec)
    return [
        run_split(table, split, model_cfg, feature_group, threshold, model_kind, keep_models, key)
        for table, split in expand_spec(windows, spec)
    ]


TABLE_COLUMNS = [
    "AUROC", "Accuracy", "Engagement Precision", "Engagement Recall",
    "Disengagement Precision", "Disengagement Recall",
]
_FIELDS = ["auroc", "accuracy", "engaged_precision", "engaged_recall", "disengaged_precision", "disengaged_recall"]


def summarize(reports: list[EvalReport]) -> pd.DataFrame:
    """Average reports per (family, key) into the Tables S4-S6 layout.

    The first column is ``Training Users`` for generalized runs and
    ``Training Proportion`` otherwise. Undefined values are skipped in means.
    """
    if not reports:
        raise ValueError("no reports to summarize")
    df = pd.DataFrame([r.as_dict() for r in reports])
    rows = []
    for (family, key), block in df.groupby(["family", "key"], sort=True):
        means = [float(np.nanmean(block[f].to_numpy(float))) if block[f].notna().any() else UNDEFINED
                 for f in _FIELDS]
        rows.append([family, key, len(block)] + means)
    out = pd.DataFrame(rows, columns=["family", "key", "n_splits"] + TABLE_COLUMNS)
    families = set(out["family"])
    if families == {"generalized"}:
        out = out.rename(columns={"key": "Training Users"})
        out["Training Users"] = out["Training Users"].astype(int)
    else:
        out = out.rename(columns={"key": "Training Proportion"})
    return out
